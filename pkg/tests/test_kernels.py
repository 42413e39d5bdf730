"""Lane equivalence: the numba kernels must match the numpy fallback."""

import numpy as np
import pytest

from treesense import kernels
from treesense.tree import random_tree


@pytest.fixture(scope="module")
def trees():
    rng = np.random.default_rng(99)
    return [random_tree(rng, periods=p) for p in (1, 2, 3, 3)]


def _strategy(rng, m):
    return np.ascontiguousarray(rng.normal(0, 0.2, (m.nonleaf_ids.shape[0], m.d)))


def test_propagate_lanes_agree(trees):
    rng = np.random.default_rng(1)
    for m in trees:
        H = _strategy(rng, m)
        a = kernels._propagate_wealth_np(m.parent, m.srow, m.level_starts,
                                         m.prices, H, 1.5)
        if kernels.NUMBA_ENABLED:
            b = kernels._propagate_wealth_nb(m.parent, m.srow, m.level_starts,
                                             m.prices, H, 1.5)
            # lanes may differ in summation order by a few ulp, never more
            assert np.allclose(a, b, rtol=1e-14, atol=1e-14)
        assert a[0] == 1.5


def test_aggregate_lanes_agree(trees):
    rng = np.random.default_rng(2)
    for m in trees:
        vals = np.zeros(m.n)
        vals[m.leaf_ids] = rng.normal(0, 1, m.n_leaves)
        a = kernels._aggregate_up_np(m.parent, m.level_starts, vals)
        if kernels.NUMBA_ENABLED:
            b = kernels._aggregate_up_nb(m.parent, m.level_starts, vals)
            assert np.allclose(a, b, rtol=0, atol=1e-15 * np.abs(a).max())
        assert a[0] == pytest.approx(vals[m.leaf_ids].sum())


def test_expected_child_lanes_agree(trees):
    rng = np.random.default_rng(3)
    for m in trees:
        vals = rng.normal(0, 1, m.n)
        a = kernels._expected_child_np(m.parent, m.edge_prob, m.level_starts, vals)
        if kernels.NUMBA_ENABLED:
            b = kernels._expected_child_nb(m.parent, m.edge_prob, m.level_starts, vals)
            assert np.allclose(a, b, rtol=0, atol=1e-15 * (1 + np.abs(a).max()))
        # leaf rows accumulate nothing
        assert np.all(a[m.leaf_ids] == 0.0)


def test_expected_child_matrix_input(trees):
    rng = np.random.default_rng(4)
    m = trees[-1]
    vals = rng.normal(0, 1, (m.n, 2))
    a = kernels._expected_child_np(m.parent, m.edge_prob, m.level_starts, vals)
    if kernels.NUMBA_ENABLED:
        b = kernels._expected_child_nb(m.parent, m.edge_prob, m.level_starts,
                                       np.ascontiguousarray(vals))
        assert np.allclose(a, b, rtol=0, atol=1e-15 * (1 + np.abs(a).max()))
