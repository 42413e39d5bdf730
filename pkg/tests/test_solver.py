import numpy as np
import pytest

from treesense.solver import (SolverError, duality_audit, first_order_audit,
                              solve_dual, solve_primal, value_curve)
from treesense.tree import MarketTree, random_tree
from treesense.utility import BlendUtility, PowerUtility, log_utility

from test_tree import binomial, two_period_binomial


def trinomial():
    return MarketTree.one_period([1.0], [[1.6], [1.0], [0.6]], [0.3, 0.4, 0.3])


class TestPrimal:
    def test_log_binomial_closed_form(self):
        # log-optimal terminal wealth is x dP/dQ
        sol = solve_primal(binomial(), log_utility(), 1.0)
        assert np.allclose(sol.X_T, [1.5, 0.75], atol=1e-12)
        assert sol.u1 == pytest.approx(1.0, abs=1e-12)
        assert sol.interior

    def test_log_optimal_density_general(self):
        rng = np.random.default_rng(21)
        from treesense.tree import find_martingale_measure
        for _ in range(5):
            m = random_tree(rng, periods=1)
            q = find_martingale_measure(m)
            sol = solve_primal(m, log_utility(), 2.0)
            if m.n_leaves - 1 == np.linalg.matrix_rank(m.gain_matrix()):
                assert np.max(np.abs(sol.X_T - 2.0 * m.leaf_prob / q)) < 1e-8

    def test_deterministic_model(self):
        m = MarketTree.one_period([1.0], [[1.0], [1.0]], [0.3, 0.7])
        u = PowerUtility(2.0)
        sol = solve_primal(m, u, 1.7)
        assert np.allclose(sol.X, 1.7)
        assert sol.u == pytest.approx(float(u.U(np.array([1.7]))[0]))

    def test_crra_homotheticity(self):
        m = two_period_binomial()
        u = PowerUtility(0.5)
        s1 = solve_primal(m, u, 1.0)
        s3 = solve_primal(m, u, 3.0)
        assert np.max(np.abs(s3.X_T - 3.0 * s1.X_T)) < 1e-9
        assert s3.u1 == pytest.approx(s1.u1 * 3.0 ** -0.5, rel=1e-10)

    def test_capital_must_be_positive(self):
        with pytest.raises(SolverError):
            solve_primal(binomial(), log_utility(), -1.0)

    def test_solution_invariants(self):
        rng = np.random.default_rng(33)
        for _ in range(10):
            m = random_tree(rng)
            u = BlendUtility([0.5, 0.5], [0.7, 2.2])
            x = float(rng.uniform(0.4, 3.0))
            sol = solve_primal(m, u, x)
            aud = duality_audit(sol)
            assert aud["eq11_leafwise"] < 1e-12
            assert aud["eq50_product_moment"] < 1e-10
            assert aud["eq9_conjugacy"] < 1e-9
            assert aud["supermartingale_violation"] < 1e-9
            if sol.interior:
                assert aud["y_martingale_residual"] < 1e-9
            assert sol.X[0] == pytest.approx(x)
            assert sol.Y[0] == pytest.approx(sol.y)
            assert sol.X_T.min() > 0 and np.all(sol.Y_T > 0)


class TestFirstOrderAudit:
    def test_interior_residuals_small(self):
        rng = np.random.default_rng(17)
        for _ in range(10):
            m = random_tree(rng)
            sol = solve_primal(m, PowerUtility(2.0), 1.0)
            aud = first_order_audit(sol, m)
            assert aud["foc_max"] <= 1e-9
            assert aud["node_dual_max"] <= 1e-9

    def test_deterministic_residuals_zero(self):
        m = MarketTree.one_period([1.0], [[1.0], [1.0]], [0.5, 0.5])
        sol = solve_primal(m, log_utility(), 1.0)
        aud = first_order_audit(sol, m)
        assert aud["foc_max"] == 0.0
        assert aud["node_dual_max"] == 0.0

    def test_example2_buy_and_hold_moment(self):
        from treesense.atlas import example2
        lvl = example2(10)
        assert lvl.diagnostics["foc_buy_and_hold"] <= 1e-10
        assert lvl.diagnostics["holding_error"] <= 1e-10


class TestDual:
    def test_conjugacy_of_dual_solution(self):
        m = trinomial()
        u = BlendUtility([0.6, 0.4], [0.7, 2.5])
        base = solve_primal(m, u, 1.3)
        sol = solve_dual(m, u, base.y)
        assert sol.x == pytest.approx(1.3, rel=1e-9)
        assert sol.v1 == pytest.approx(-1.3, rel=1e-9)

    def test_power_closed_form_inverse(self):
        # u'(x) = u'(1) x^-gamma, so x(y) = (y / u'(1))^(-1/gamma)
        m = trinomial()
        u = PowerUtility(2.0)
        u1_at_1 = solve_primal(m, u, 1.0).u1
        for y in (0.5, 2.0):
            sol = solve_dual(m, u, y)
            assert sol.x == pytest.approx((y / u1_at_1) ** -0.5, rel=1e-9)

    def test_deterministic_dual_value(self):
        from treesense.utility import conjugate
        m = MarketTree.one_period([1.0], [[1.0], [1.0]], [0.5, 0.5])
        u = PowerUtility(2.0)
        sol = solve_dual(m, u, 3.0)
        assert sol.v == pytest.approx(conjugate(u, 3.0).V, rel=1e-10)
        assert sol.y == pytest.approx(3.0, rel=1e-10)


class TestValueCurve:
    def test_monotonicity(self):
        m = trinomial()
        curve = value_curve(m, BlendUtility([0.5, 0.5], [0.8, 2.0]),
                            [0.5, 1.0, 2.0, 4.0])
        assert curve["u_increasing"]
        assert curve["u1_decreasing"]

    def test_single_point(self):
        curve = value_curve(binomial(), log_utility(), [1.0])
        assert len(curve["samples"]) == 1

    def test_power_shape(self):
        m = trinomial()
        u = PowerUtility(2.0)
        curve = value_curve(m, u, [1.0, 2.0])
        (x1, u1_, _), (x2, u2_, _) = curve["samples"]
        # u(x) = u(1) x^(1-gamma) for constant relative risk aversion
        assert u2_ == pytest.approx(u1_ * 2.0 ** (1 - 2.0), rel=1e-10)
