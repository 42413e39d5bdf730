"""Hot per-node tree kernels: numba lane with a pure-numpy fallback.

Every kernel exists twice, as a flat-loop version compiled with ``@njit``
and as a vectorized numpy version that sweeps the tree one time level at a
time.  The numba lane is used when numba imports cleanly; set the
environment variable ``TREESENSE_NUMBA=0`` before import to force the
numpy lane (useful for debugging and for the lane benchmark).

All kernels assume the canonical node ordering of :class:`~treesense.tree.
MarketTree`: nodes sorted by time, so every parent index is smaller than
its children's indices and each time level is a contiguous slice.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("TREESENSE_NUMBA", "1").strip().lower()
NUMBA_REQUESTED = _flag not in ("0", "false", "off", "no")

NUMBA_ENABLED = False
if NUMBA_REQUESTED:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False


# ---------------------------------------------------------------------------
# numpy lane
# ---------------------------------------------------------------------------

def _propagate_wealth_np(parent, srow, level_starts, prices, holdings, x0):
    n = parent.shape[0]
    x = np.empty(n)
    x[0] = x0
    for t in range(1, level_starts.shape[0] - 1):
        lo, hi = level_starts[t], level_starts[t + 1]
        par = parent[lo:hi]
        dS = prices[lo:hi] - prices[par]
        x[lo:hi] = x[par] + np.einsum("ij,ij->i", holdings[srow[par]], dS)
    return x


def _aggregate_up_np(parent, level_starts, node_vals):
    out = node_vals.copy()
    for t in range(level_starts.shape[0] - 2, 0, -1):
        lo, hi = level_starts[t], level_starts[t + 1]
        np.add.at(out, parent[lo:hi], out[lo:hi])
    return out


def _expected_child_np(parent, edge_prob, level_starts, vals):
    acc = np.zeros_like(vals)
    for t in range(1, level_starts.shape[0] - 1):
        lo, hi = level_starts[t], level_starts[t + 1]
        np.add.at(acc, parent[lo:hi], edge_prob[lo:hi, None] * vals[lo:hi]
                  if vals.ndim == 2 else edge_prob[lo:hi] * vals[lo:hi])
    return acc


# ---------------------------------------------------------------------------
# numba lane
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:

    @njit(cache=True)
    def _propagate_wealth_nb(parent, srow, level_starts, prices, holdings, x0):
        n = parent.shape[0]
        d = prices.shape[1]
        x = np.empty(n)
        x[0] = x0
        for i in range(1, n):
            p = parent[i]
            r = srow[p]
            acc = x[p]
            for j in range(d):
                acc += holdings[r, j] * (prices[i, j] - prices[p, j])
            x[i] = acc
        return x

    @njit(cache=True)
    def _aggregate_up_nb(parent, level_starts, node_vals):
        n = parent.shape[0]
        out = node_vals.copy()
        for i in range(n - 1, 0, -1):
            out[parent[i]] += out[i]
        return out

    @njit(cache=True)
    def _expected_child_nb(parent, edge_prob, level_starts, vals):
        acc = np.zeros_like(vals)
        if vals.ndim == 2:
            for i in range(parent.shape[0] - 1, 0, -1):
                p = parent[i]
                for j in range(vals.shape[1]):
                    acc[p, j] += edge_prob[i] * vals[i, j]
        else:
            for i in range(parent.shape[0] - 1, 0, -1):
                acc[parent[i]] += edge_prob[i] * vals[i]
        return acc


def propagate_wealth(parent, srow, level_starts, prices, holdings, x0):
    """Wealth at every node from initial capital and per-node holdings."""
    if NUMBA_ENABLED:
        return _propagate_wealth_nb(parent, srow, level_starts, prices,
                                    holdings, float(x0))
    return _propagate_wealth_np(parent, srow, level_starts, prices,
                                holdings, float(x0))


def aggregate_up(parent, level_starts, node_vals):
    """Sum node values over each subtree (children into parents)."""
    if NUMBA_ENABLED:
        return _aggregate_up_nb(parent, level_starts, node_vals)
    return _aggregate_up_np(parent, level_starts, node_vals)


def expected_child(parent, edge_prob, level_starts, vals):
    """One-step conditional expectation: sum of edge_prob * child value."""
    vals = np.ascontiguousarray(vals, dtype=np.float64)
    if NUMBA_ENABLED:
        return _expected_child_nb(parent, edge_prob, level_starts, vals)
    return _expected_child_np(parent, edge_prob, level_starts, vals)
