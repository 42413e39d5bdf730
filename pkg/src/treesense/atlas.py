"""Truncated counterexample models and their divergence diagnostics.

Four one-parameter families exhibit, at growing truncation level N, the
failure modes of the second-order theory:

1. an unbounded dual curvature (risk aversion not bounded below): the
   diagnostic E[V''(xi) xi^2] grows like N^3;
2. an unbounded primal curvature (risk aversion not bounded above): the
   buy-and-hold optimum stays exact at every level while
   E[U''(S1)(1 + a(S1 - 1))^2] sinks without bound;
3. a model whose discounted securities degenerate under the optimal
   numeraire: the one-sided second difference quotients of u at x = 1
   stay separated by a fixed gap;
4. an exactly solvable four-state model in which the marginal investment
   rule is negative in one state and zero in another.

Diagnostics are reported per level, never extrapolated to a limit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.optimize import brentq
from scipy.special import erfc

from .sensitivity import martingale_audit, sensitivity
from .solver import first_order_audit, solve_primal
from .tree import MarketTree, find_martingale_measure, numeraire_change, validate_tree
from .utility import (RHO_MASS, UtilityError, _lobe_sum, _rho, _rho_i1,
                      build_constrained_utility)


class AtlasError(RuntimeError):
    pass


@dataclass
class AtlasLevel:
    example: int
    N: int
    model: MarketTree = None
    utility: object = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class TruncationLadder:
    example: int
    levels: list

    def values(self, key):
        return [(lvl.N, lvl.diagnostics[key]) for lvl in self.levels]


# ---------------------------------------------------------------------------
# Example 1: dual curvature spikes; E[V''(xi) xi^2] diverges
# ---------------------------------------------------------------------------

class DualCurvatureSpec:
    """Convex dual built from its curvature: V''(y) = phi(y).

    phi is the baseline t^{-3/2} e^{-t} with upward spikes at the integers
    k = 1..N reaching 2^k; V'(y) = -integral of phi over (y, inf) is closed
    form through the incomplete gamma recurrence and the bump primitives.
    """

    def __init__(self, N, width_base=6.0):
        self.N = int(N)
        self.lobes = []
        for k in range(1, self.N + 1):
            w = width_base ** (-k)
            amp = 2.0 ** k - self._psi(float(k))
            self.lobes.append((float(k), w, amp))
        self.spike_masses = [a * w * RHO_MASS for _, w, a in self.lobes]

    @staticmethod
    def _psi(t):
        return t ** (-1.5) * np.exp(-t)

    def phi(self, y):
        y = np.asarray(y, dtype=float)
        return self._psi(y) + _lobe_sum(y, self.lobes, 0)

    def phi_tail_integral(self, y):
        """integral of phi over (y, inf), closed form."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        base = 2.0 * np.exp(-y) / np.sqrt(y) - 2.0 * np.sqrt(np.pi) * erfc(np.sqrt(y))
        spikes = np.zeros_like(y)
        for c, w, a in self.lobes:
            spikes += a * w * (RHO_MASS - _rho_i1((y - c) / w))
        return base + spikes

    def V1(self, y):
        return -self.phi_tail_integral(y)

    def double_tail_integral(self):
        """integral over (0, inf) of the phi tail = E-style first moment of phi."""
        return float(np.sqrt(np.pi) + sum(c * m for (c, _, _), m
                                          in zip(self.lobes, self.spike_masses)))

    def tolerance_scan(self, grid=None):
        """Scan of tail-integral / (t phi(t)); its sup certifies the c2 bound."""
        if grid is None:
            pieces = [np.geomspace(1e-6, self.N + 2.0, 4000)]
            for c, w, _ in self.lobes:
                pieces.append(np.linspace(c - 1.5 * w, c + 1.5 * w, 25))
            grid = np.unique(np.concatenate(pieces))
        ratio = self.phi_tail_integral(grid) / (grid * self.phi(grid))
        return float(ratio.max()), grid[int(np.argmax(ratio))]


def example1(N) -> AtlasLevel:
    """Truncated dual-spike law: support {1/2, 1, 5, ..., N}, mean one."""
    if N < 6:
        raise AtlasError("example 1 needs N >= 6")
    ks = np.arange(5, N + 1)
    tail_p = 2.0 ** (-ks)
    T0 = float(tail_p.sum())
    T1 = float((ks * tail_p).sum())
    m_half = 2.0 * (T1 - T0)
    m_one = 1.0 - T0 - m_half
    if m_half <= 0.0 or m_one <= 0.0:
        raise AtlasError(f"example 1 calibration infeasible at N = {N}")
    support = np.concatenate([[0.5, 1.0], ks.astype(float)])
    probs = np.concatenate([[m_half, m_one], tail_p])

    vspec = DualCurvatureSpec(N)
    phi_vals = vspec.phi(support)
    div1 = float(probs @ (phi_vals * support ** 2))
    c2_scan, c2_argmax = vspec.tolerance_scan()
    diag = {
        "mass_half": m_half,
        "mass_one": m_one,
        "mean": float(probs @ support),
        "div1": div1,
        "div1_tail_lower_bound": float((ks.astype(float) ** 2).sum()),
        "phi_integral_delta_ladder": {
            f"{d:g}": float(vspec.phi_tail_integral(np.array([d]))[0])
            for d in (1e-2, 1e-4, 1e-6)},
        "double_integral": vspec.double_tail_integral(),
        "tolerance_scan_max": c2_scan,
        "tolerance_scan_argmax": float(c2_argmax),
    }
    return AtlasLevel(example=1, N=int(N), model=None, utility=vspec, diagnostics=diag)


# ---------------------------------------------------------------------------
# Example 2: primal curvature spikes; buy-and-hold optimal at every level
# ---------------------------------------------------------------------------

def _example2_utility(N, k_spike):
    x_hi = 2.0 * N + 2.0
    unit = sum((2.0 ** k - 1.0 / k ** 2) * 4.0 ** (-k) * RHO_MASS
               for k in range(k_spike, N + 1))
    w0 = min(0.9, 0.2 / (x_hi * unit))
    spikes = [{"center": float(k), "width": w0 * 4.0 ** (-k),
               "neg_curvature": 2.0 ** k}
              for k in range(k_spike, N + 1)]
    return build_constrained_utility({
        "name": f"ex2(N={N})",
        "spikes": spikes,
        "corridor": (0.9, 4.0),
        "allow_upper_violation": True,
        "scan_range": (1e-3, x_hi),
        "domain": (1e-300, 1e300),
    }), w0


def example2(N, k_spike=5, a_grid=None) -> AtlasLevel:
    """One-period model on {1/2, 1, 2, ..., N} with curvature spikes at k >= 5."""
    if N < max(4, k_spike):
        raise AtlasError(f"example 2 needs N >= {max(4, k_spike)}")
    u, w0 = _example2_utility(N, k_spike)
    ks = np.arange(2, N + 1)
    tail_p = 2.0 ** (-ks)
    u1_tail = u.U1(ks.astype(float))
    moment_tail = float(tail_p @ (u1_tail * (ks - 1.0)))
    u1_half = float(u.U1(np.array([0.5]))[0])

    def resid(m_half):
        return -0.5 * m_half * u1_half + moment_tail

    m_half = brentq(resid, 0.0, 1.0, xtol=1e-16, rtol=8.9e-16)
    m_one = 1.0 - float(tail_p.sum()) - m_half
    if m_half <= 0.0 or m_one <= 0.0:
        raise AtlasError(f"example 2 calibration infeasible at N = {N}")

    support = np.concatenate([[0.5, 1.0], ks.astype(float)])
    probs = np.concatenate([[m_half, m_one], tail_p])
    model = MarketTree.one_period([1.0], support[:, None], probs)

    sol = solve_primal(model, u, 1.0, tol=1e-12)
    audit = first_order_audit(sol, model)
    foc_raw = abs(float(probs @ (u.U1(support) * (support - 1.0))))
    holding_err = abs(float(sol.strategy[0, 0]) - 1.0)
    wealth_err = float(np.max(np.abs(sol.X_T - support)))

    numer = numeraire_change(model, sol.X)
    bound_bond = float(numer.prices[:, 0].max())
    bound_stock = float(numer.prices[:, 1].max())

    if a_grid is None:
        a_grid = np.linspace(0.0, 2.0, 9)
    u2_vals = u.U2(support)
    div2 = {f"{a:g}": float(probs @ (u2_vals * (1.0 + a * (support - 1.0)) ** 2))
            for a in a_grid}

    diag = {"mass_half": m_half, "mass_one": m_one, "spike_width_scale": w0,
            "foc_buy_and_hold": foc_raw, "holding_error": holding_err,
            "wealth_error": wealth_err, "foc_max": audit["foc_max"],
            "numeraire_bond_bound": bound_bond,
            "numeraire_stock_bound": bound_stock,
            "div2": div2, "div2_at_1": div2["1"]}
    lvl = AtlasLevel(example=2, N=int(N), model=model, utility=u, diagnostics=diag)
    lvl.solution = sol
    return lvl


# ---------------------------------------------------------------------------
# Example 3: degenerate numeraire; one-sided quotients stay separated
# ---------------------------------------------------------------------------

def _example3_law(N, c_tail):
    ks = np.arange(1, N + 1)
    tail_p = c_tail * 8.0 ** (-ks)
    T0 = float(tail_p.sum())
    T1 = float(c_tail * (4.0 ** (-ks)).sum())
    p_two = 2.0 * (T1 - T0)
    p_one = 1.0 - (2.0 * T1 - T0)
    if p_two <= 0.0 or p_one <= 0.0:
        raise AtlasError(f"example 3 calibration infeasible at N = {N}")
    support = np.concatenate([[2.0, 1.0], 2.0 ** (-ks)])
    probs = np.concatenate([[p_two, p_one], tail_p])
    return support, probs


def _example3_utility(N, support, probs):
    ks = np.arange(1, N + 1)
    centers = 2.0 ** (-ks)
    return build_constrained_utility({
        "name": f"ex3(N={N})",
        "anchors": [[float(s), 1.0 / float(s)] for s in support],
        "moment": {
            "centers": list(centers),
            "rel_amps": list(4.0 ** ks),
            "widths": list(centers / 4.0),
            "support": list(support),
            "probs": list(probs),
            "weights": list(1.0 - support ** 2),
            "bracket": (-4.0, 4.0),
        },
        "corridor": "scan",
        "scan_range": (float(centers[-1]) / 64.0, 16.0),
        "domain": (1e-300, 1e300),
    })


def example3(N, c_tail=0.6, eps_ladder=None) -> AtlasLevel:
    """One-period model on {2, 1, 1/2, ..., 2^-N} with log anchors.

    Reports f(a) = E[U''(S1)(1 + a(S1 - 1))^2], its critical point at 1/2,
    the gap f(1/2) - f(1), and the one-sided difference quotients of u at
    x = 1 over the admissible epsilon window.
    """
    if N < 4:
        raise AtlasError("example 3 needs N >= 4")
    support, probs = _example3_law(N, c_tail)
    u = _example3_utility(N, support, probs)
    model = MarketTree.one_period([1.0], support[:, None], probs)

    u2_vals = u.U2(support)

    def f(a):
        return float(probs @ (u2_vals * (1.0 + a * (support - 1.0)) ** 2))

    fprime_half = 2.0 * float(probs @ (u2_vals * (1.0 + 0.5 * (support - 1.0))
                                       * (support - 1.0)))
    gap = f(0.5) - f(1.0)

    sol1 = solve_primal(model, u, 1.0, tol=1e-13)
    u_at_1 = sol1.u
    u1_err = abs(sol1.u1 - 1.0)

    window = (2.0 ** (-N + 5), 1e-2)
    if window[0] > window[1]:
        eps_used = []
    elif eps_ladder is None:
        # keep clear of the window floor, where the truncation's residual
        # admissibility slack starts to smooth the kink back out
        eps_used = list(np.geomspace(min(max(window[0], 5e-3), window[1]),
                                     window[1], 3))
    else:
        eps_used = [e for e in eps_ladder if window[0] <= e <= window[1]]
        if not eps_used:
            eps_used = list(np.geomspace(window[1], window[0], 3))
    quotients = []
    for e in eps_used:
        up = solve_primal(model, u, 1.0 + e, tol=1e-13)
        dn = solve_primal(model, u, 1.0 - e, tol=1e-13)
        q_plus = (up.u - u_at_1 - e) / (0.5 * e * e)
        q_minus = (dn.u - u_at_1 + e) / (0.5 * e * e)
        quotients.append({"eps": float(e), "q_plus": q_plus, "q_minus": q_minus,
                          "up_interior": up.interior, "down_interior": dn.interior})

    diag = {"support_min": float(support.min()),
            "mass_two": float(probs[0]), "mass_one": float(probs[1]),
            "mean_inverse": float(probs @ (1.0 / support)),
            "mean_inverse_sq": float(probs @ (1.0 / support ** 2)),
            "f_half": f(0.5), "f_one": f(1.0), "gap": gap,
            "fprime_half": fprime_half,
            "u_prime_error": u1_err,
            "moment_residual": u.build_report.get("moment_residual", np.nan),
            "window": list(window), "quotients": quotients}
    lvl = AtlasLevel(example=3, N=int(N), model=model, utility=u, diagnostics=diag)
    lvl.solution = sol1
    return lvl


# ---------------------------------------------------------------------------
# Example 4: exact four-state model with a negative marginal investment rule
# ---------------------------------------------------------------------------

EX4_SUPPORT = (0.125, 0.25, 0.5, 2.0)
EX4_SUPPORT_FRAC = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(2))
EX4_XPRIME = (Fraction(-1, 6), Fraction(0), Fraction(1, 3), Fraction(7, 3))


def _example4_law():
    w = 1.0 / np.asarray(EX4_SUPPORT)

    def mean_inv(lam):
        q = np.exp(-lam * w)
        q /= q.sum()
        return float(q @ w) - 1.0

    lam = brentq(mean_inv, 0.0, 50.0, xtol=1e-15, rtol=8.9e-16)
    q = np.exp(-lam * w)
    q /= q.sum()
    return q


def example4() -> AtlasLevel:
    """Four-state model; the marginal rule 1 + (4/3)(S - 1) is negative at 1/8."""
    support = np.asarray(EX4_SUPPORT)
    probs = _example4_law()
    weights = (1.0 + (4.0 / 3.0) * (support - 1.0)) * (support - 1.0)
    u = build_constrained_utility({
        "name": "ex4",
        "anchors": [[float(s), 1.0 / float(s)] for s in support],
        "moment": {
            "centers": [2.0], "rel_amps": [1.0], "widths": [0.5],
            "support": list(support), "probs": list(probs),
            "weights": list(weights), "bracket": (-4.0, 4.0),
        },
        "corridor": "scan",
        "scan_range": (1e-3, 16.0),
        "domain": (1e-300, 1e300),
    })
    model = MarketTree.one_period([1.0], support[:, None], probs)
    sol = solve_primal(model, u, 1.0, tol=1e-13)
    rep = sensitivity(model, sol)
    audit = first_order_audit(sol, model)

    xp_paper = np.array([float(v) for v in EX4_XPRIME])
    xp_formula = 1.0 + (4.0 / 3.0) * (support - 1.0)
    # exact rational check of the paper table against the formula
    exact_ok = all(Fraction(1) + Fraction(4, 3) * (s - 1) == v
                   for s, v in zip(EX4_SUPPORT_FRAC, EX4_XPRIME))
    alpha_consistency = float(np.max(np.abs(
        (1.0 + rep.alpha_hat) - (sol.x / sol.X_T) * rep.Xp_T)))

    u2_vals = u.U2(support)

    def fprime(a):
        return 2.0 * float(probs @ (u2_vals * (1.0 + a * (support - 1.0))
                                    * (support - 1.0)))

    diag = {"probs": [float(v) for v in probs],
            "mean_inverse": float(probs @ (1.0 / support)),
            "xp_table": [float(v) for v in rep.Xp_T],
            "xp_paper": [float(v) for v in xp_paper],
            "xp_error": float(np.max(np.abs(rep.Xp_T - xp_paper))),
            "xp_formula_error": float(np.max(np.abs(xp_formula - xp_paper))),
            "paper_table_exact": bool(exact_ok),
            "fprime_at_4_3": fprime(4.0 / 3.0),
            "prob_xp_negative": float(probs[0]),
            "prob_xp_zero": float(probs[1]),
            "alpha_consistency": alpha_consistency,
            "foc_max": audit["foc_max"],
            "moment_residual": u.build_report.get("moment_residual", np.nan),
            "a": rep.a, "b": rep.b,
            "residuals": {k: (float(v) if np.isscalar(v) else v)
                          for k, v in rep.residuals.items()}}
    lvl = AtlasLevel(example=4, N=0, model=model, utility=u, diagnostics=diag)
    lvl.solution = sol
    lvl.report = rep
    return lvl


# ---------------------------------------------------------------------------
# ladders
# ---------------------------------------------------------------------------

DEFAULT_LEVELS = {1: (10, 20, 40, 80), 2: (8, 12, 16, 20), 3: (8, 10, 12, 13), 4: (0,)}


def build_ladder(example, levels=None, **kwargs) -> TruncationLadder:
    builders = {1: example1, 2: example2, 3: example3}
    if example == 4:
        return TruncationLadder(example=4, levels=[example4()])
    if example not in builders:
        raise AtlasError(f"unknown example {example}")
    levels = DEFAULT_LEVELS[example] if levels is None else levels
    built = [builders[example](int(N), **kwargs) for N in levels]
    ladder = TruncationLadder(example=example, levels=built)
    for lvl in built:
        if lvl.model is not None:
            rep = validate_tree(lvl.model)
            if not rep.ok:
                raise AtlasError(f"generated model invalid at N={lvl.N}: {rep.violations}")
            q = find_martingale_measure(lvl.model)
            if not isinstance(q, np.ndarray):
                raise AtlasError(f"generated model admits arbitrage at N={lvl.N}")
    return ladder


def divergence_report(ladder: TruncationLadder, key):
    """Per-level values, consecutive ratios, and a log-log growth exponent."""
    vals = ladder.values(key)
    if len(vals) < 3:
        raise AtlasError("divergence report needs at least 3 ladder levels")
    Ns = np.array([float(n) for n, _ in vals])
    vs = np.array([float(v) for _, v in vals])
    ratios = [float(vs[i + 1] / vs[i]) for i in range(len(vs) - 1)]
    mags = np.abs(vs)
    if np.any(mags <= 0.0):
        exponent = 0.0
    else:
        exponent = float(np.polyfit(np.log(Ns), np.log(mags), 1)[0])
    return {"key": key, "levels": [int(n) for n, _ in vals],
            "values": [float(v) for v in vs],
            "ratios": ratios, "exponent": exponent}
