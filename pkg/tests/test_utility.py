import numpy as np
import pytest

from treesense.utility import (BlendUtility, PowerUtility, UtilityError,
                               build_constrained_utility, conjugate,
                               corridor_scan, elasticity_probe,
                               expansion_probe, invert_marginal, log_utility,
                               marginal_ratio_check, rra)

GRID = np.geomspace(0.05, 20.0, 60)


class TestRiskAversion:
    def test_power_is_constant(self):
        u = PowerUtility(3.0)
        assert np.allclose(rra(u, GRID), 3.0)

    def test_log_is_one(self):
        assert np.allclose(rra(log_utility(), GRID), 1.0)

    def test_blend_between_components(self):
        u = BlendUtility([0.5, 0.5], [0.5, 2.0])
        a = rra(u, GRID)
        assert np.all(a > 0.5) and np.all(a < 2.0)
        assert a.max() - a.min() > 0.1  # genuinely non-constant


class TestConjugate:
    def test_log_closed_form(self):
        u = log_utility()
        for y in (0.25, 1.0, 4.0):
            cp = conjugate(u, y)
            assert abs(cp.x_star - 1.0 / y) < 1e-12
            assert abs(cp.V - (-np.log(y) - 1.0)) < 1e-12
            assert abs(cp.V1 + 1.0 / y) < 1e-12

    def test_power_two_worked_value(self):
        # U(x) = -1/x, U'(x) = x^-2; at y = 4: x* = 1/2, V(4) = -2 - 2 = -4
        u = PowerUtility(2.0)
        cp = conjugate(u, 4.0)
        assert abs(cp.x_star - 0.5) < 1e-13
        assert abs(cp.V + 4.0) < 1e-12

    def test_tolerance_and_reciprocity(self):
        u = BlendUtility([0.7, 0.3], [0.8, 3.0])
        for x in (0.1, 0.9, 7.0):
            y = float(u.U1(np.array([x]))[0])
            cp = conjugate(u, y)
            assert abs(cp.x_star - x) <= 1e-10 * x
            # round trip V(U'(x)) + x U'(x) = U(x)
            assert abs(cp.V + x * y - float(u.U(np.array([x]))[0])) <= 1e-10 * (
                1 + abs(cp.V))
            # B(y) A(x) = 1
            B = -y * cp.V2 / cp.V1
            A = float(rra(u, np.array([x]))[0])
            assert abs(A * B - 1.0) < 1e-12

    def test_vectorized_inversion(self):
        u = PowerUtility(1.5)
        ys = np.geomspace(0.01, 50.0, 23)
        xs = invert_marginal(u, ys)
        assert np.max(np.abs(u.U1(xs) - ys) / ys) < 1e-12


class TestCorridorScan:
    def test_power_no_violations(self):
        lo, hi, viol = corridor_scan(PowerUtility(2.0), GRID)
        assert lo == pytest.approx(2.0)
        assert hi == pytest.approx(2.0)
        assert viol == []

    def test_blend_extrema_inside(self):
        u = BlendUtility([0.5, 0.5], [0.5, 2.0])
        lo, hi, viol = corridor_scan(u, GRID)
        assert 0.5 < lo < hi < 2.0
        assert viol == []

    def test_spiky_build_violates_upper_by_design(self):
        from treesense.atlas import _example2_utility
        u, _ = _example2_utility(10, 5)
        grid = np.unique(np.concatenate([GRID, np.arange(5.0, 11.0)]))
        lo, hi, viol = corridor_scan(u, grid)
        assert viol  # the curvature spikes pierce the declared upper bound
        assert lo > u.corridor[0]
        assert hi > u.corridor[1]


class TestMarginalRatio:
    def test_log_small_corridor(self):
        rep = marginal_ratio_check(log_utility(corridor=(0.9, 1.1)), 1.05, GRID)
        assert rep["all_pass"]

    def test_power_two_worked_bounds(self):
        u = PowerUtility(2.0, corridor=(1.9, 2.1))
        rep = marginal_ratio_check(u, 1.2, GRID)
        # U'(ax)/U'(x) = a^-2
        ratio = 1.2 ** -2
        assert abs(rep["ratio_min"] - ratio) < 1e-12
        assert rep["b1"] < ratio < rep["b2"]
        assert rep["all_pass"]

    def test_precondition_error(self):
        with pytest.raises(UtilityError):
            marginal_ratio_check(PowerUtility(2.0, corridor=(1.9, 2.1)),
                                 np.exp(1.0 / 2.1) * 1.01, GRID)

    def test_bounds_hold_for_certified_builds(self):
        from treesense.atlas import example4
        u = example4().utility
        grid = np.geomspace(0.05, 8.0, 60)
        for a in (1.02, 1.05):
            assert marginal_ratio_check(u, a, grid)["all_pass"]


class TestElasticity:
    def test_power_half(self):
        rep = elasticity_probe(PowerUtility(0.5), np.geomspace(1.0, 1e4, 40))
        assert not rep["trivially_satisfied"]
        assert rep["max_ratio_top_decade"] == pytest.approx(0.5)
        assert not rep["flag"]

    def test_negative_utility_trivial(self):
        rep = elasticity_probe(PowerUtility(2.0), np.geomspace(1.0, 1e4, 40))
        assert rep["trivially_satisfied"]

    def test_log_ratio_decays(self):
        rep = elasticity_probe(log_utility(), np.geomspace(2.0, 1e6, 50))
        ratios = rep["ratios"]
        assert ratios[-1] < ratios[0]
        assert ratios[-1] < 0.1


class TestExpansionProbe:
    def setup_method(self):
        rng = np.random.default_rng(42)
        self.zeta = rng.uniform(0.5, 2.0, 12)
        self.eta = rng.uniform(-0.5, 0.5, 12) * self.zeta
        self.probs = rng.dirichlet(np.ones(12))

    def test_zero_direction(self):
        u = PowerUtility(2.0)
        rep = expansion_probe(u, self.zeta, np.zeros_like(self.zeta),
                              self.probs, [0.0, 0.3])
        for row in rep["samples"]:
            assert row["w1"] == 0.0 and row["w2"] == 0.0

    def test_substitution_identity(self):
        # eta = zeta makes w(s) = E[U((1+s) zeta)], so w'(0) = E[U'(zeta) zeta]
        u = PowerUtility(0.7)
        rep = expansion_probe(u, self.zeta, self.zeta, self.probs, [0.0])
        expected = float(self.probs @ (u.U1(self.zeta) * self.zeta))
        assert rep["samples"][0]["w1"] == pytest.approx(expected, rel=1e-14)

    def test_fd_agreement(self):
        # step chosen near the eps^(1/4) optimum for central second differences
        u = PowerUtility(2.0)
        rep = expansion_probe(u, self.zeta, self.eta, self.probs, [0.0, 0.2],
                              fd_step=2e-4)
        for row in rep["samples"]:
            assert abs(row["w2"] - row["w2_fd"]) <= 1e-6 * abs(row["w2"])

    def test_second_order_convergence(self):
        # halving the step should cut the central-difference error about 4x;
        # steps stay large enough that truncation dominates roundoff
        u = BlendUtility([0.5, 0.5], [0.8, 2.5])
        errs = []
        for h in (1.6e-2, 8e-3, 4e-3):
            rep = expansion_probe(u, self.zeta, self.eta, self.probs, [0.1],
                                  fd_step=h)
            row = rep["samples"][0]
            errs.append(abs(row["w2"] - row["w2_fd"]))
        assert 3.0 < errs[0] / errs[1] < 5.0
        assert 3.0 < errs[1] / errs[2] < 5.0

    def test_out_of_range_s(self):
        with pytest.raises(UtilityError):
            expansion_probe(PowerUtility(2.0), self.zeta, self.zeta,
                            self.probs, [1.5])


class TestConstrainedBuild:
    def test_log_anchors_return_log(self):
        anchors = [[x, 1.0 / x] for x in (0.125, 0.25, 0.5, 2.0)]
        u = build_constrained_utility({"anchors": anchors, "corridor": (0.9, 1.1)})
        xs = np.geomspace(0.01, 10.0, 30)
        assert np.max(np.abs(u.U1(xs) - 1.0 / xs)) < 1e-14
        assert np.max(np.abs(u.U(xs) - np.log(xs))) < 1e-14

    def test_anchor_preservation_under_moment(self):
        from treesense.atlas import example3
        lvl = example3(8)
        u = lvl.utility
        support = np.concatenate([[2.0, 1.0], 2.0 ** (-np.arange(1, 9))])
        assert np.max(np.abs(u.U1(support) * support - 1.0)) < 1e-12

    def test_example3_moment_residual(self):
        from treesense.atlas import example3
        lvl = example3(8)
        assert abs(lvl.diagnostics["moment_residual"]) < 1e-12

    def test_example4_critical_point(self):
        from treesense.atlas import example4
        assert abs(example4().diagnostics["fprime_at_4_3"]) < 1e-12

    def test_concavity_and_monotonicity_scan(self):
        from treesense.atlas import example3
        u = example3(8).utility
        xs = np.geomspace(2.0 ** -10, 8.0, 4000)
        assert np.all(u.U2(xs) < 0.0)
        assert np.all(u.U1(xs) > 0.0)

    def test_bad_anchor_order_rejected(self):
        with pytest.raises(UtilityError):
            build_constrained_utility({"anchors": [[1.0, 1.0], [2.0, 1.5]]})

    def test_unbracketed_moment_rejected(self):
        anchors = [[x, 1.0 / x] for x in (0.5, 1.0, 2.0)]
        with pytest.raises(UtilityError):
            build_constrained_utility({
                "anchors": anchors,
                "moment": {"centers": [1.0], "rel_amps": [1.0], "widths": [0.2],
                           "support": [0.5, 1.0, 2.0],
                           "probs": [0.2, 0.5, 0.3],
                           # weights of one sign: no root for any amplitude
                           "weights": [1.0, 1.0, 1.0],
                           "bracket": (-0.5, 0.5)}})

    def test_pchip_anchor_path(self):
        # non-reciprocal anchors exercise the generic interpolating baseline
        anchors = [[0.5, 3.0], [1.0, 1.0], [2.0, 0.4], [4.0, 0.18]]
        u = build_constrained_utility({"anchors": anchors, "corridor": "scan"})
        ax = np.array([a[0] for a in anchors])
        ay = np.array([a[1] for a in anchors])
        assert np.max(np.abs(u.U1(ax) / ay - 1.0)) < 1e-10
        xs = np.geomspace(0.05, 40.0, 500)
        assert np.all(np.diff(u.U(xs)) > 0)
        assert np.all(u.U2(xs) < 0)
        # U must integrate U' to high accuracy
        mid, h = 1.3, 1e-4
        fd = (u.U(np.array([mid + h]))[0] - u.U(np.array([mid - h]))[0]) / (2 * h)
        assert abs(fd - u.U1(np.array([mid]))[0]) < 1e-8
