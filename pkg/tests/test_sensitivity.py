from fractions import Fraction

import numpy as np
import pytest

from treesense.sensitivity import (SensitivityError, SubspaceBasis, fd_oracle,
                                   gain_subspace, martingale_audit,
                                   numeraire_rank_report, orthocomplement,
                                   quad_project, quad_project_exact,
                                   risk_measure, sensitivity)
from treesense.solver import solve_primal
from treesense.tree import MarketTree, random_tree
from treesense.utility import BlendUtility, PowerUtility, log_utility

from test_tree import binomial
from test_solver import trinomial


class TestRiskMeasure:
    def test_log_utility_recovers_physical(self):
        # X_T U'(X_T) is constant for log utility, so the tilt is trivial
        rng = np.random.default_rng(2)
        m = random_tree(rng)
        sol = solve_primal(m, log_utility(), 1.0)
        r = risk_measure(sol)
        assert np.max(np.abs(r - m.leaf_prob)) < 1e-12

    def test_deterministic_model(self):
        m = MarketTree.one_period([1.0], [[1.0], [1.0]], [0.4, 0.6])
        sol = solve_primal(m, PowerUtility(2.0), 1.0)
        assert np.allclose(risk_measure(sol), [0.4, 0.6])

    def test_crra_two_reweights_by_inverse_wealth(self):
        m = binomial()
        sol = solve_primal(m, PowerUtility(2.0), 1.0)
        r = risk_measure(sol)
        expect = m.leaf_prob / sol.X_T
        expect /= expect.sum()
        assert np.max(np.abs(r - expect)) < 1e-12

    def test_rejects_non_interior(self):
        sol = solve_primal(binomial(), log_utility(), 1.0)
        sol.interior = False
        with pytest.raises(SensitivityError):
            risk_measure(sol)


class TestSubspaces:
    def test_complete_binomial_dimension(self):
        m = binomial()
        sol = solve_primal(m, log_utility(), 1.0)
        r = risk_measure(sol)
        A = gain_subspace(m, sol, r)
        assert A.dim == m.n_leaves - 1 == 1
        B = orthocomplement(A)
        assert B.dim == 0

    def test_deterministic_empty_gain_space(self):
        m = MarketTree.one_period([1.0], [[1.0], [1.0], [1.0]], [0.2, 0.5, 0.3])
        sol = solve_primal(m, PowerUtility(2.0), 1.0)
        r = risk_measure(sol)
        A = gain_subspace(m, sol, r)
        assert A.dim == 0
        B = orthocomplement(A)
        assert B.dim == m.n_leaves - 1

    def test_incomplete_trinomial(self):
        m = trinomial()
        sol = solve_primal(m, log_utility(), 1.0)
        r = risk_measure(sol)
        A = gain_subspace(m, sol, r)
        B = orthocomplement(A)
        assert (A.dim, B.dim) == (1, 1)

    def test_duplicated_asset_does_not_inflate(self):
        m2 = MarketTree.one_period([1.0, 1.0],
                                   [[1.6, 1.6], [1.0, 1.0], [0.6, 0.6]],
                                   [0.3, 0.4, 0.3])
        sol = solve_primal(m2, log_utility(), 1.0)
        r = risk_measure(sol)
        assert gain_subspace(m2, sol, r).dim == 1

    def test_orthonormality_and_zero_mean(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            m = random_tree(rng)
            sol = solve_primal(m, BlendUtility([0.5, 0.5], [0.8, 2.0]), 1.0)
            r = risk_measure(sol)
            A = gain_subspace(m, sol, r)
            B = orthocomplement(A)
            assert A.dim + B.dim == m.n_leaves - 1
            for basis in (A, B):
                if not basis.dim:
                    continue
                V = basis.vectors
                G = (V * r[:, None]).T @ V
                assert np.max(np.abs(G - np.eye(basis.dim))) < 1e-10
                assert np.max(np.abs(r @ V)) < 1e-12
            if A.dim and B.dim:
                cross = (A.vectors * r[:, None]).T @ B.vectors
                assert np.max(np.abs(cross)) < 1e-12

    def test_three_leaf_worked_complement(self):
        r = np.full(3, 1.0 / 3.0)
        g = np.array([1.0, -1.0, 0.0])
        A = SubspaceBasis(vectors=(g / np.sqrt(r @ g ** 2))[:, None], metric=r)
        B = orthocomplement(A)
        b = B.vectors[:, 0]
        expect = np.array([1.0, 1.0, -2.0])
        expect /= np.sqrt(r @ expect ** 2)
        assert np.max(np.abs(b - expect * np.sign(b[0] * expect[0]))) < 1e-12


class TestQuadProject:
    def test_constant_weights_give_zero_optimizer(self):
        r = np.full(3, 1.0 / 3.0)
        g = np.array([1.0, -1.0, 0.0])
        basis = SubspaceBasis(vectors=(g / np.sqrt(r @ g ** 2))[:, None], metric=r)
        value, m, _ = quad_project(basis, np.full(3, 1.7))
        assert value == pytest.approx(1.7, abs=1e-15)
        assert np.max(np.abs(m)) < 1e-15

    def test_worked_three_leaf_fixture(self):
        r = np.full(3, 1.0 / 3.0)
        zeta = np.array([1.0, 2.0, 2.0])
        g = np.array([1.0, -1.0, 0.0])
        basis = SubspaceBasis(vectors=(g / np.sqrt(r @ g ** 2))[:, None], metric=r)
        a, alpha, _ = quad_project(basis, zeta)
        assert a == pytest.approx(14.0 / 9.0, abs=1e-14)
        assert np.max(np.abs(alpha - np.array([1, -1, 0]) / 3.0)) < 1e-14
        B = orthocomplement(basis)
        b, beta, _ = quad_project(B, 1.0 / zeta)
        assert b == pytest.approx(9.0 / 14.0, abs=1e-14)
        assert np.max(np.abs(beta - np.array([-1, -1, 2]) / 7.0)) < 1e-14

    def test_exact_rational_twin(self):
        third = Fraction(1, 3)
        val, alpha = quad_project_exact([[1, -1, 0]], [1, 2, 2],
                                        [third, third, third])
        assert val == Fraction(14, 9)
        assert alpha == [Fraction(1, 3), Fraction(-1, 3), 0]

    def test_rejects_nonpositive_weights(self):
        r = np.full(2, 0.5)
        basis = SubspaceBasis(vectors=np.zeros((2, 0)), metric=r)
        with pytest.raises(SensitivityError):
            quad_project(basis, np.array([1.0, 0.0]))


class TestSensitivityEngine:
    def test_power_collapse(self):
        rng = np.random.default_rng(4)
        for gamma in (0.5, 2.0):
            m = random_tree(rng)
            sol = solve_primal(m, PowerUtility(gamma), 1.0)
            rep = sensitivity(m, sol)
            assert abs(rep.a - gamma) < 1e-12
            assert np.max(np.abs(rep.alpha_hat)) < 1e-12
            assert np.max(np.abs(rep.Xp - sol.X / sol.x)) < 1e-12

    def test_complete_market_collapse(self):
        m = binomial()
        sol = solve_primal(m, PowerUtility(2.0), 1.0)
        rep = sensitivity(m, sol)
        assert rep.dim_complement == 0
        assert np.max(np.abs(rep.beta_hat)) < 1e-12
        r = risk_measure(sol)
        assert rep.b == pytest.approx(float(r @ (1.0 / 2.0 * np.ones(2))), abs=1e-12)

    def test_identity_battery_small(self):
        rng = np.random.default_rng(12)
        u = BlendUtility([0.6, 0.4], [0.7, 2.5])
        for _ in range(15):
            m = random_tree(rng)
            sol = solve_primal(m, u, float(rng.uniform(0.5, 2.0)))
            rep = sensitivity(m, sol)
            res = rep.residuals
            assert res["ab_reciprocity"] <= 1e-10
            assert res["eq40_proportionality"] <= 1e-10
            assert res["eq30_u2"] <= 1e-9
            assert res["eq31_v2"] <= 1e-9
            assert res["eq32_cross"] <= 1e-9
            assert res["lemma5_conjugate_curvature"] <= 1e-9
            assert max(res["orth_alpha"], res["orth_beta"],
                       res["orth_alphabeta"]) <= 1e-10
            assert res["dims_complementarity"] == 0
            for k in ("corridor_a_low", "corridor_a_high",
                      "corridor_b_low", "corridor_b_high"):
                assert res[k] > 0
            for k in ("mart_XYp", "mart_XpY", "mart_XpYp"):
                assert res[k] <= 1e-9

    def test_corridor_violation_rejected(self):
        m = trinomial()
        u = PowerUtility(2.0, corridor=(2.5, 3.0))  # deliberately wrong
        sol = solve_primal(m, u, 1.0)
        with pytest.raises(SensitivityError):
            sensitivity(m, sol)

    def test_non_interior_rejected(self):
        sol = solve_primal(binomial(), log_utility(), 1.0)
        sol.interior = False
        with pytest.raises(SensitivityError):
            sensitivity(binomial(), sol)


class TestFdOracle:
    def test_power_second_derivative(self):
        m = trinomial()
        u = PowerUtility(2.0)
        sol = solve_primal(m, u, 1.0)
        rep = sensitivity(m, sol)
        fd = fd_oracle(m, u, 1.0, u2_hint=rep.u2)
        # a = gamma makes u'' = -gamma u'/x
        assert fd.u2_fd == pytest.approx(-2.0 * sol.u1, rel=1e-5)
        assert abs(rep.u2 - fd.u2_fd) <= 1e-5 * abs(rep.u2)

    def test_deterministic_reduces_to_utility(self):
        m = MarketTree.one_period([1.0], [[1.0], [1.0]], [0.5, 0.5])
        u = BlendUtility([0.5, 0.5], [0.8, 2.0])
        fd = fd_oracle(m, u, 1.3, dual=False)
        assert fd.u2_fd == pytest.approx(float(u.U2(np.array([1.3]))[0]), rel=1e-6)
        assert np.max(np.abs(fd.Xp_fd - 1.0)) < 1e-9

    def test_blend_engine_agreement(self):
        m = trinomial()
        u = BlendUtility([0.6, 0.4], [0.7, 2.5])
        sol = solve_primal(m, u, 1.3)
        rep = sensitivity(m, sol)
        fd = fd_oracle(m, u, 1.3, u2_hint=rep.u2)
        assert abs(rep.u2 - fd.u2_fd) <= 1e-4 * abs(rep.u2)
        assert np.max(np.abs(rep.Xp_T - fd.Xp_fd)) <= 1e-3 * (
            1.0 + np.max(np.abs(rep.Xp_T)))
        assert np.max(np.abs(rep.Yp_T - fd.Yp_fd)) <= 1e-3 * (
            1.0 + np.max(np.abs(rep.Yp_T)))
        assert fd.richardson_monotone
        assert fd.expansion_slope > 2.5

    def test_needs_two_steps(self):
        with pytest.raises(SensitivityError):
            fd_oracle(trinomial(), PowerUtility(2.0), 1.0, ladder=(1e-2,))


class TestAudits:
    def test_martingale_audit_power(self):
        m = trinomial()
        sol = solve_primal(m, PowerUtility(2.0), 1.0)
        rep = sensitivity(m, sol)
        out = martingale_audit(sol, rep)
        assert max(out.values()) <= 1e-12

    def test_rank_report_binomial(self):
        m = binomial()
        sol = solve_primal(m, log_utility(), 1.0)
        rep = numeraire_rank_report(m, sol)
        assert rep["rows"][0]["rank"] == 1
        assert rep["rows"][0]["redundant"]  # 2 columns, rank 1

    def test_rank_report_deterministic(self):
        m = MarketTree.one_period([1.0], [[1.0], [1.0]], [0.5, 0.5])
        sol = solve_primal(m, PowerUtility(2.0), 1.0)
        rep = numeraire_rank_report(m, sol)
        assert rep["rows"][0]["rank"] == 0
        assert rep["rows"][0]["degenerate"]

    def test_duplicated_asset_rank_unchanged(self):
        m1 = trinomial()
        m2 = MarketTree.one_period([1.0, 1.0],
                                   [[1.6, 1.6], [1.0, 1.0], [0.6, 0.6]],
                                   [0.3, 0.4, 0.3])
        u = log_utility()
        r1 = numeraire_rank_report(m1, solve_primal(m1, u, 1.0))
        r2 = numeraire_rank_report(m2, solve_primal(m2, u, 1.0))
        assert r1["rows"][0]["rank"] == r2["rows"][0]["rank"]
