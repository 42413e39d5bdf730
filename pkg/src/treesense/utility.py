"""Utility functions, conjugates, and risk-aversion machinery.

Every utility exposes vectorized evaluators for U, U' and U'' on (0, inf)
together with a declared relative-risk-aversion corridor (c1, c2) and a
trusted domain.  Built-in families (power, log, blend) are closed form.
Constrained builds used by the counterexample atlas start from a baseline
whose curvature is -theta(x)/x * U'(x) and add localized polynomial bumps:

* a one-signed "spike" changes U'' sharply at a point and decrements U'
  by the spike mass as wealth crosses it;
* a zero-integral composite bump retunes U'' at a point while leaving U'
  unchanged at the point itself and everywhere outside its support, so
  anchored marginal-utility values survive exactly.

Bump primitives are polynomials, so U', U and all moments have closed
forms; no quadrature enters the solver's hot path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq


class UtilityError(ValueError):
    """Raised for infeasible builds or out-of-domain evaluation."""


class DomainError(UtilityError):
    pass


# ---------------------------------------------------------------------------
# compactly supported polynomial bump rho(s) = (1 - s^2)^3 on [-1, 1]
# ---------------------------------------------------------------------------

RHO_MASS = 32.0 / 35.0
_G_NEG1 = 93.0 / 280.0


def _rho(s):
    s = np.asarray(s, dtype=float)
    inside = np.abs(s) < 1.0
    out = np.zeros_like(s)
    t = s[inside]
    out[inside] = (1.0 - t * t) ** 3
    return out


def _rho_i1(s):
    """First antiderivative of rho, anchored at -1 (saturates at the mass)."""
    s = np.asarray(s, dtype=float)
    out = np.where(s >= 1.0, RHO_MASS, 0.0)
    inside = np.abs(s) < 1.0
    t = s[inside]
    out[inside] = (t - t ** 3 + 0.6 * t ** 5 - t ** 7 / 7.0) + 16.0 / 35.0
    return out


def _rho_i2(s):
    """Second antiderivative of rho, anchored at -1 (grows linearly past 1)."""
    s = np.asarray(s, dtype=float)
    out = np.where(s >= 1.0, RHO_MASS + RHO_MASS * (s - 1.0), 0.0)
    inside = np.abs(s) < 1.0
    t = s[inside]
    g = t * t / 2.0 - t ** 4 / 4.0 + t ** 6 / 10.0 - t ** 8 / 56.0
    out[inside] = (g - _G_NEG1) + (16.0 / 35.0) * (t + 1.0)
    return out


def zero_mean_lobes(center, width, amp):
    """Three disjoint lobes whose total and half-range integrals vanish.

    The central lobe peaks at ``amp``; the side lobes compensate so that
    both the integral over [center - width, center] and the one over
    [center, center + width] are exactly zero.
    """
    return [(center, 0.35 * width, amp),
            (center - 0.65 * width, 0.30 * width, -amp * 7.0 / 12.0),
            (center + 0.65 * width, 0.30 * width, -amp * 7.0 / 12.0)]


def _lobe_sum(x, lobes, order):
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.zeros_like(arr)
    for c, w, a in lobes:
        s = (arr - c) / w
        if order == 0:
            out += a * _rho(s)
        elif order == 1:
            out += (a * w) * _rho_i1(s)
        else:
            out += (a * w * w) * _rho_i2(s)
    return out.reshape(np.shape(x))


# ---------------------------------------------------------------------------
# utility specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConjugatePoint:
    y: float
    V: float
    V1: float
    V2: float
    x_star: float


class UtilitySpec:
    """Evaluators for U, U', U'' with a declared corridor and trusted domain."""

    name = "abstract"

    def __init__(self, corridor, domain_hint=(1e-300, 1e300)):
        c1, c2 = corridor
        if not (0.0 < c1 < c2 < np.inf):
            raise UtilityError(f"corridor must satisfy 0 < c1 < c2 < inf, got {corridor}")
        self.corridor = (float(c1), float(c2))
        self.domain_hint = (float(domain_hint[0]), float(domain_hint[1]))

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain_hint
        if np.any(x <= 0.0):
            raise DomainError(f"{self.name}: utility evaluated at nonpositive wealth")
        if np.any(x < lo) or np.any(x > hi):
            raise DomainError(
                f"{self.name}: wealth outside trusted domain [{lo:g}, {hi:g}]")
        return x

    def U(self, x):
        raise NotImplementedError

    def U1(self, x):
        raise NotImplementedError

    def U2(self, x):
        raise NotImplementedError


class PowerUtility(UtilitySpec):
    """Constant relative risk aversion gamma; gamma = 1 is log."""

    def __init__(self, gamma, corridor=None):
        gamma = float(gamma)
        if gamma <= 0:
            raise UtilityError("power utility needs gamma > 0")
        self.gamma = gamma
        self.name = f"power({gamma:g})"
        if corridor is None:
            corridor = (0.9 * gamma, 1.1 * gamma)
        super().__init__(corridor)

    def U(self, x):
        x = self._check(x)
        if self.gamma == 1.0:
            return np.log(x)
        return x ** (1.0 - self.gamma) / (1.0 - self.gamma)

    def U1(self, x):
        x = self._check(x)
        return x ** (-self.gamma)

    def U2(self, x):
        x = self._check(x)
        return -self.gamma * x ** (-self.gamma - 1.0)


def log_utility(corridor=(0.9, 1.1)):
    return PowerUtility(1.0, corridor)


class BlendUtility(UtilitySpec):
    """Positive combination of power utilities; risk aversion varies in x."""

    def __init__(self, weights, gammas, corridor=None):
        self.weights = np.asarray(weights, dtype=float)
        self.gammas = np.asarray(gammas, dtype=float)
        if self.weights.shape != self.gammas.shape or self.weights.ndim != 1:
            raise UtilityError("blend needs matching 1-d weights and gammas")
        if np.any(self.weights <= 0) or np.any(self.gammas <= 0):
            raise UtilityError("blend weights and gammas must be positive")
        self.name = "blend(" + ",".join(f"{g:g}" for g in self.gammas) + ")"
        if corridor is None:
            corridor = (0.95 * self.gammas.min(), 1.05 * self.gammas.max())
        super().__init__(corridor)
        self._parts = [PowerUtility(g) for g in self.gammas]

    def U(self, x):
        x = self._check(x)
        return sum(w * p.U(x) for w, p in zip(self.weights, self._parts))

    def U1(self, x):
        x = self._check(x)
        return sum(w * p.U1(x) for w, p in zip(self.weights, self._parts))

    def U2(self, x):
        x = self._check(x)
        return sum(w * p.U2(x) for w, p in zip(self.weights, self._parts))


class _LogBase:
    """Exact logarithmic baseline: U' = 1/x."""

    def U(self, x):
        return np.log(x)

    def U1(self, x):
        return 1.0 / x

    def U2(self, x):
        return -1.0 / (x * x)


class _PchipBase:
    """Monotone C1 interpolation of log U' against log x through anchors.

    Beyond the anchor range the local slope is frozen, giving closed-form
    power tails.  U itself comes from a cached composite-Simpson cumulative
    integral on a dense log grid (relative error well below 1e-10 for the
    smooth interpolants this class is used with).
    """

    def __init__(self, xs, ys, n_grid=4001):
        lx, ly = np.log(xs), np.log(ys)
        self._interp = PchipInterpolator(lx, ly)
        self._d = self._interp.derivative()
        self._lo, self._hi = float(xs[0]), float(xs[-1])
        self._slope_lo = float(self._d(lx[0]))
        self._slope_hi = float(self._d(lx[-1]))
        self._y_lo, self._y_hi = float(ys[0]), float(ys[-1])
        grid = np.exp(np.linspace(np.log(self._lo), np.log(self._hi), n_grid))
        vals = self._u1_core(grid)
        csum = np.zeros(n_grid)
        fm = self._u1_core(0.5 * (grid[:-1] + grid[1:]))
        seg = (grid[1:] - grid[:-1]) / 6.0 * (vals[:-1] + 4.0 * fm + vals[1:])
        csum[1:] = np.cumsum(seg)
        self._grid, self._cum = grid, csum

    def _u1_core(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        below = x < self._lo
        above = x > self._hi
        mid = ~(below | above)
        out[mid] = np.exp(self._interp(np.log(x[mid])))
        out[below] = self._y_lo * (x[below] / self._lo) ** self._slope_lo
        out[above] = self._y_hi * (x[above] / self._hi) ** self._slope_hi
        return out

    def U1(self, x):
        return self._u1_core(x)

    def U2(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        below = x < self._lo
        above = x > self._hi
        mid = ~(below | above)
        lm = np.log(x[mid])
        out[mid] = np.exp(self._interp(lm)) * self._d(lm) / x[mid]
        out[below] = self._y_lo * self._slope_lo / self._lo * \
            (x[below] / self._lo) ** (self._slope_lo - 1.0)
        out[above] = self._y_hi * self._slope_hi / self._hi * \
            (x[above] / self._hi) ** (self._slope_hi - 1.0)
        return out

    def U(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        inside = (x >= self._lo) & (x <= self._hi)
        xi = x[inside]
        idx = np.searchsorted(self._grid, xi) - 1
        idx = np.clip(idx, 0, self._grid.shape[0] - 2)
        a = self._grid[idx]
        fa = self._u1_core(a)
        fm = self._u1_core(0.5 * (a + xi))
        fb = self._u1_core(xi)
        out[inside] = self._cum[idx] + (xi - a) / 6.0 * (fa + 4.0 * fm + fb)
        below = x < self._lo
        if np.any(below):
            s = self._slope_lo
            xa = x[below]
            if abs(s + 1.0) < 1e-12:
                out[below] = self._y_lo * self._lo * np.log(xa / self._lo)
            else:
                out[below] = self._y_lo * self._lo / (s + 1.0) * \
                    ((xa / self._lo) ** (s + 1.0) - 1.0)
        above = x > self._hi
        if np.any(above):
            s = self._slope_hi
            xa = x[above]
            if abs(s + 1.0) < 1e-12:
                out[above] = self._cum[-1] + self._y_hi * self._hi * np.log(xa / self._hi)
            else:
                out[above] = self._cum[-1] + self._y_hi * self._hi / (s + 1.0) * \
                    ((xa / self._hi) ** (s + 1.0) - 1.0)
        return out


class ConstrainedUtility(UtilitySpec):
    """Baseline plus localized curvature bumps; closed-form evaluators."""

    def __init__(self, base, lobes, corridor, domain_hint, name="constrained",
                 build_report=None):
        self.name = name
        super().__init__(corridor, domain_hint)
        self._base = base
        self._lobes = list(lobes)
        self.build_report = build_report or {}

    def U(self, x):
        x = self._check(x)
        xa = np.atleast_1d(x)
        return (self._base.U(xa) + _lobe_sum(xa, self._lobes, 2)).reshape(np.shape(x))

    def U1(self, x):
        x = self._check(x)
        xa = np.atleast_1d(x)
        return (self._base.U1(xa) + _lobe_sum(xa, self._lobes, 1)).reshape(np.shape(x))

    def U2(self, x):
        x = self._check(x)
        xa = np.atleast_1d(x)
        return (self._base.U2(xa) + _lobe_sum(xa, self._lobes, 0)).reshape(np.shape(x))


# ---------------------------------------------------------------------------
# risk aversion / conjugate operations
# ---------------------------------------------------------------------------

def rra(u: UtilitySpec, x):
    """Relative risk aversion -x U''(x) / U'(x)."""
    x = np.asarray(x, dtype=float)
    return -x * u.U2(x) / u.U1(x)


def invert_marginal(u: UtilitySpec, y):
    """Solve U'(x) = y by bisection-safeguarded Newton, vectorized over y."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if np.any(y <= 0.0):
        raise UtilityError("marginal utility level must be positive")
    dom_lo = max(u.domain_hint[0], 1e-280)
    dom_hi = min(u.domain_hint[1], 1e280)
    start = min(max(1.0, dom_lo), dom_hi)
    lo = np.full(y.shape, start)
    hi = np.full(y.shape, start)
    for _ in range(600):
        need = u.U1(lo) < y
        if not need.any():
            break
        if np.any(need & (lo <= dom_lo * (1.0 + 1e-12))):
            raise UtilityError("marginal level above the range of U' on the trusted domain")
        lo = np.where(need, np.maximum(lo / 4.0, dom_lo), lo)
    for _ in range(600):
        need = u.U1(hi) > y
        if not need.any():
            break
        if np.any(need & (hi >= dom_hi * (1.0 - 1e-12))):
            raise UtilityError("marginal level below the range of U' on the trusted domain")
        hi = np.where(need, np.minimum(hi * 4.0, dom_hi), hi)
    x = np.sqrt(lo * hi)
    for _ in range(200):
        f = u.U1(x) - y
        done = np.abs(f) <= 1e-14 * y
        if done.all():
            break
        hi = np.where(f < 0.0, x, hi)
        lo = np.where(f > 0.0, x, lo)
        step = f / u.U2(x)
        x_new = x - step
        bad = (x_new <= lo) | (x_new >= hi) | ~np.isfinite(x_new)
        x_new[bad] = np.sqrt(lo[bad] * hi[bad])
        if np.max(np.abs(x_new - x) / x) < 1e-15:
            x = x_new
            break
        x = x_new
    return x


def conjugate(u: UtilitySpec, y) -> ConjugatePoint:
    """Convex conjugate point: V(y) = sup_x {U(x) - x y} and derivatives."""
    x = float(invert_marginal(u, y)[0])
    V = float(u.U(x) - x * y)
    V2 = float(-1.0 / u.U2(x))
    return ConjugatePoint(y=float(y), V=V, V1=-x, V2=V2, x_star=x)


def conjugate_values(u: UtilitySpec, y):
    """Vectorized (V, V', V'') at an array of marginal levels."""
    y = np.asarray(y, dtype=float)
    x = invert_marginal(u, y)
    return u.U(x) - x * y, -x, -1.0 / u.U2(x)


def corridor_scan(u: UtilitySpec, grid):
    """Sampled extrema of the risk-aversion coefficient plus violations."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise UtilityError("corridor scan needs a nonempty grid")
    a = rra(u, grid)
    c1, c2 = u.corridor
    bad = (a <= c1) | (a >= c2)
    violations = [(float(x), float(v)) for x, v in zip(grid[bad], a[bad])]
    return float(a.min()), float(a.max()), violations


def marginal_ratio_check(u: UtilitySpec, a, grid):
    """Two-sided marginal-utility ratio bounds for a scaling factor a > 1.

    With corridor (c1, c2) the bounds are b1 = 1 - c2 ln a and
    b2 = 1 / (1 + c1 ln a); requires b1 > 0.
    """
    a = float(a)
    if a <= 1.0:
        raise UtilityError("scaling factor must exceed 1")
    c1, c2 = u.corridor
    b1 = 1.0 - c2 * np.log(a)
    b2 = 1.0 / (1.0 + c1 * np.log(a))
    if b1 <= 0.0:
        raise UtilityError(f"precondition 1 - c2 ln a > 0 fails (got {b1:g})")
    grid = np.asarray(grid, dtype=float)
    ratio = u.U1(a * grid) / u.U1(grid)
    ok = (ratio > b1) & (ratio < b2)
    return {"b1": float(b1), "b2": float(b2),
            "ratio_min": float(ratio.min()), "ratio_max": float(ratio.max()),
            "lower_margin": float((ratio - b1).min()),
            "upper_margin": float((b2 - ratio).min()),
            "all_pass": bool(ok.all()),
            "failures": [float(x) for x in grid[~ok]]}


def elasticity_probe(u: UtilitySpec, grid):
    """Sampled asymptotic-elasticity ratios x U'(x) / U(x) where U > 0."""
    grid = np.sort(np.asarray(grid, dtype=float))
    uv = u.U(grid)
    pos = uv > 0.0
    if not pos.any():
        return {"trivially_satisfied": True, "ratios": [], "flag": False}
    ratios = grid[pos] * u.U1(grid[pos]) / uv[pos]
    top = grid[pos] >= grid[pos].max() / 10.0
    flag = bool(np.any(ratios[top] > 1.0 - 1e-6))
    return {"trivially_satisfied": False,
            "ratios": [float(r) for r in ratios],
            "max_ratio_top_decade": float(ratios[top].max()),
            "flag": flag}


def expansion_probe(u: UtilitySpec, zeta, eta, probs, s_grid, fd_step=None):
    """Differentiation under the expectation: w(s) = E[U(zeta + s eta)].

    Returns analytic (w, w', w'') samples and central finite differences of
    w for the first two derivatives.  Requires |s| < 1/K on the grid where
    K bounds |eta| / zeta.
    """
    zeta = np.asarray(zeta, dtype=float)
    eta = np.asarray(eta, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if np.any(zeta <= 0.0):
        raise UtilityError("zeta must be strictly positive")
    K = float(np.max(np.abs(eta) / zeta)) if eta.size else 0.0
    s_grid = np.asarray(s_grid, dtype=float)
    if K > 0.0 and np.any(np.abs(s_grid) >= 1.0 / K):
        raise UtilityError(f"s grid leaves (-1/K, 1/K) with K = {K:g}")
    h = fd_step if fd_step is not None else min(1e-4, (0.5 / K - np.abs(s_grid).max()) / 4
                                                if K > 0 else 1e-4)

    def w(s):
        return float(probs @ u.U(zeta + s * eta))

    rows = []
    for s in s_grid:
        w0 = w(s)
        w1 = float(probs @ (u.U1(zeta + s * eta) * eta))
        w2 = float(probs @ (u.U2(zeta + s * eta) * eta * eta))
        w1_fd = (w(s + h) - w(s - h)) / (2.0 * h)
        w2_fd = (w(s + h) - 2.0 * w0 + w(s - h)) / (h * h)
        rows.append({"s": float(s), "w": w0, "w1": w1, "w2": w2,
                     "w1_fd": w1_fd, "w2_fd": w2_fd})
    return {"K": K, "fd_step": float(h), "samples": rows}


# ---------------------------------------------------------------------------
# constrained builder
# ---------------------------------------------------------------------------

def _default_scan_grid(domain, lobes, n=1500):
    lo, hi = domain
    grid = [np.exp(np.linspace(np.log(lo), np.log(hi), n))]
    for c, w, _ in lobes:
        grid.append(np.linspace(max(c - w, lo), min(c + w, hi), 41))
    return np.unique(np.concatenate(grid))


def build_constrained_utility(cfg) -> ConstrainedUtility:
    """Build a utility from anchors, curvature spikes and one moment condition.

    ``cfg`` keys:

    anchors        list of [x, U'(x)] pairs (strictly decreasing in x)
    spikes         list of {center, width, neg_curvature}: makes
                   -U''(center) equal neg_curvature via a one-signed bump
    moment         optional {centers, rel_amps, widths, support, probs,
                   weights, bracket}: zero-integral bumps at ``centers``
                   with relative amplitudes ``rel_amps``; the common scalar
                   multiplier is root-found so that
                   sum_i probs[i] * U''(support[i]) * weights[i] = 0
    corridor       declared (c1, c2); "scan" derives one from the scan
    domain         trusted domain [lo, hi]
    allow_upper_violation   accept corridor violations above c2 (spiky builds)
    """
    anchors = cfg.get("anchors")
    domain = tuple(cfg.get("domain", (1e-300, 1e300)))
    if anchors:
        ax = np.asarray([a[0] for a in anchors], dtype=float)
        ay = np.asarray([a[1] for a in anchors], dtype=float)
        order = np.argsort(ax)
        ax, ay = ax[order], ay[order]
        if np.any(np.diff(ay) >= 0.0):
            raise UtilityError("anchored marginal utilities must be strictly decreasing")
        if np.max(np.abs(ax * ay - 1.0)) <= 1e-13:
            base = _LogBase()
        else:
            base = _PchipBase(ax, ay)
    else:
        ax = ay = None
        base = _LogBase()

    lobes = []
    for sp in cfg.get("spikes", ()):
        c, w = float(sp["center"]), float(sp["width"])
        target = float(sp["neg_curvature"])
        base_u2 = float(np.asarray(base.U2(np.asarray([c])))[0])
        amp = -target - base_u2
        if amp > 0.0:
            raise UtilityError(
                f"spike at {c:g} would need positive curvature (target below baseline)")
        lobes.append((c, w, amp))

    report = {}
    moment = cfg.get("moment")
    if moment:
        centers = np.asarray(moment["centers"], dtype=float)
        rel = np.asarray(moment["rel_amps"], dtype=float)
        widths = np.asarray(moment["widths"], dtype=float)
        support = np.asarray(moment["support"], dtype=float)
        probs = np.asarray(moment["probs"], dtype=float)
        weights = np.asarray(moment["weights"], dtype=float)

        def group(mu):
            out = []
            for c, r, w in zip(centers, rel, widths):
                out.extend(zero_mean_lobes(c, w, mu * r))
            return out

        def resid(mu):
            u2 = base.U2(support) + _lobe_sum(support, lobes + group(mu), 0)
            return float(probs @ (u2 * weights))

        lo, hi = moment.get("bracket", (-8.0, 8.0))
        flo, fhi = resid(lo), resid(hi)
        if flo * fhi > 0.0:
            raise UtilityError(
                f"moment root not bracketed on [{lo:g}, {hi:g}] ({flo:g}, {fhi:g})")
        mu = brentq(resid, lo, hi, xtol=1e-15, rtol=8.9e-16)
        report["moment_scale"] = float(mu)
        report["moment_residual"] = resid(mu)
        lobes = lobes + group(mu)

    # validation scans cover the declared scan range (or the anchor range)
    if "scan_range" in cfg:
        scan_lo, scan_hi = (float(v) for v in cfg["scan_range"])
    elif anchors is not None:
        scan_lo, scan_hi = ax.min() / 64.0, ax.max() * 64.0
    else:
        scan_lo, scan_hi = 1e-8, 1e8
    grid = _default_scan_grid((max(domain[0], scan_lo), min(domain[1], scan_hi)), lobes)
    u2g = base.U2(grid) + _lobe_sum(grid, lobes, 0)
    if np.any(u2g >= 0.0):
        xbad = grid[u2g >= 0.0]
        raise UtilityError(f"built U'' is nonnegative near x = {xbad[0]:g}")
    u1g = base.U1(grid) + _lobe_sum(grid, lobes, 1)
    if np.any(u1g <= 0.0):
        xbad = grid[u1g <= 0.0]
        raise UtilityError(f"built U' is nonpositive near x = {xbad[0]:g}")

    rra_g = -grid * u2g / u1g
    corridor = cfg.get("corridor", "scan")
    if corridor == "scan":
        corridor = (0.9 * float(rra_g.min()), 1.1 * float(rra_g.max()))
    c1, c2 = corridor
    if not cfg.get("allow_upper_violation", False):
        if rra_g.min() <= c1 or rra_g.max() >= c2:
            raise UtilityError(
                f"risk aversion leaves the declared corridor: scan range "
                f"[{rra_g.min():g}, {rra_g.max():g}] vs ({c1:g}, {c2:g})")
    elif rra_g.min() <= c1:
        raise UtilityError(
            f"risk aversion falls below the declared lower bound {c1:g}")

    u = ConstrainedUtility(base, lobes, (c1, c2), domain,
                           name=cfg.get("name", "constrained"),
                           build_report=report)
    if anchors is not None:
        got = u.U1(ax)
        err = np.max(np.abs(got / ay - 1.0))
        report["anchor_max_rel_error"] = float(err)
        if err > 1e-10:
            raise UtilityError(f"anchors not reproduced (max rel error {err:g})")
    report["rra_scan_min"] = float(rra_g.min())
    report["rra_scan_max"] = float(rra_g.max())
    return u


# ---------------------------------------------------------------------------
# JSON loading
# ---------------------------------------------------------------------------

def load_utility(path) -> UtilitySpec:
    with open(path) as fh:
        doc = json.load(fh)
    return utility_from_document(doc)


def utility_from_document(doc) -> UtilitySpec:
    try:
        family = doc["family"]
    except (TypeError, KeyError) as exc:
        raise UtilityError("utility document needs a 'family' field") from exc
    if family == "power":
        return PowerUtility(doc["gamma"], corridor=doc.get("corridor"))
    if family == "log":
        return log_utility(corridor=tuple(doc.get("corridor", (0.9, 1.1))))
    if family == "blend":
        return BlendUtility(doc["weights"], doc["gammas"], corridor=doc.get("corridor"))
    if family == "constrained":
        return build_constrained_utility(doc)
    raise UtilityError(f"unknown utility family {family!r}")
