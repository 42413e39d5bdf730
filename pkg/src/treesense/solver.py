"""Primal and dual optimal-investment solvers on finite trees.

The primal problem maximizes expected terminal utility over predictable
strategies subject to nonnegative wealth at every node.  The solver runs
damped Newton over the strategy coordinates: terminal wealth is affine in
the holdings, so gradient and Hessian are exact one-liners, and a
fraction-to-boundary backtracking line search keeps every leaf wealth
strictly above zero.  With Inada utilities the objective itself acts as a
barrier, so optima that press against the admissibility boundary are
reached without an explicit constraint handler.

The dual problem is solved by primal inversion: u' is strictly decreasing,
so the capital with u'(x) = y is found by safeguarded root-finding and the
dual quantities read off the conjugacy identities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .tree import MarketTree, terminal_gain_span
from .utility import UtilitySpec, conjugate_values, invert_marginal


class SolverError(RuntimeError):
    """Newton failed to reach the requested first-order tolerance."""


@dataclass
class PrimalDualSolution:
    model: MarketTree
    utility: UtilitySpec
    x: float
    y: float                      # u'(x)
    strategy: np.ndarray          # (n_nonleaf, d) holdings
    X: np.ndarray                 # optimal wealth, per node
    Y: np.ndarray                 # dual optimizer, per node
    u: float
    u1: float
    v: float
    v1: float
    interior: bool
    grad_norm: float
    iterations: int
    X_T: np.ndarray = field(default=None)
    Y_T: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.X_T is None:
            self.X_T = self.X[self.model.leaf_ids]
        if self.Y_T is None:
            self.Y_T = self.Y[self.model.leaf_ids]


def _shrink_to_feasible(x, J, theta):
    """Scale a warm-start strategy back until all leaf wealths are positive."""
    for _ in range(60):
        w = x + J @ theta
        if w.min() > 0.05 * x:
            return theta
        theta = 0.5 * theta
    return np.zeros_like(theta)


def solve_primal(model: MarketTree, u: UtilitySpec, x, tol=1e-11,
                 max_iter=300, warm_start=None) -> PrimalDualSolution:
    """Maximize expected terminal utility from initial capital x.

    Converges when the gradient norm over strategy coordinates drops below
    ``tol * (1 + |u(x)|)``.  The reported u'(x) is E[U'(X_T) X_T] / x,
    which is exact at the optimum through the martingale property of the
    product of the optimal wealth and the dual optimizer.
    """
    x = float(x)
    if x <= 0.0:
        raise SolverError("initial capital must be positive")
    J = model.gain_matrix()
    p = model.leaf_prob
    theta = np.zeros(J.shape[1]) if warm_start is None else \
        _shrink_to_feasible(x, J, np.asarray(warm_start, dtype=float).ravel().copy())

    eps = np.finfo(float).eps
    w = x + J @ theta
    F = float(p @ u.U(w))
    g = J.T @ (p * u.U1(w))

    def at_float_floor(H):
        # coordinate-wise gradient resolution: summation noise plus the
        # effect of one ulp of theta through a possibly stiff Hessian
        floor = 32.0 * eps * (np.abs(J).T @ (p * u.U1(w)))
        floor += 4.0 * eps * (np.abs(H) @ np.abs(theta))
        return bool(np.all(np.abs(g) <= floor))

    it = 0
    stall = 0
    converged = False
    for it in range(1, max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        H = (J * (p * u.U2(w))[:, None]).T @ J
        if gnorm <= tol * (1.0 + abs(F)) or at_float_floor(H):
            converged = True
            break
        if stall >= 3:
            break
        step = np.linalg.lstsq(-H, g, rcond=1e-12)[0]
        dw = J @ step
        slope = float(g @ step)
        if slope <= 0.0:
            stall += 1
            continue
        # fraction-to-boundary: no leaf may lose more than half its wealth
        # per step, so boundary-hugging optima are approached geometrically
        # instead of overshot into a region the floats cannot leave
        neg = dw < 0.0
        t = 1.0
        if neg.any():
            t = min(1.0, float(np.min(-0.5 * w[neg] / dw[neg])))
        # once the Newton decrement falls below the float resolution of the
        # objective, Armijo cannot discriminate; take guarded full steps,
        # capped so the wealth profile cannot jump far in one move
        local = slope <= 64.0 * eps * (1.0 + abs(F))
        if local:
            cap = 0.1 * (1.0 + float(np.abs(w).max()))
            m = float(np.abs(dw).max())
            if m > cap:
                step *= cap / m
                dw *= cap / m
        accepted = False
        for _ in range(70):
            w_try = w + t * dw
            if w_try.min() > 0.0:
                F_try = float(p @ u.U(w_try))
                if local or F_try >= F + 0.25 * t * slope:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            stall += 1
            continue
        theta = theta + t * step
        w = w_try
        F = F_try
        g_new = J.T @ (p * u.U1(w))
        if local and float(np.linalg.norm(g_new)) >= gnorm:
            stall += 1
        else:
            stall = 0
        g = g_new

    gnorm = float(np.linalg.norm(g))
    if not converged and gnorm > tol * (1.0 + abs(F)):
        H = (J * (p * u.U2(w))[:, None]).T @ J
        if not at_float_floor(H):
            raise SolverError(
                f"no convergence after {it} iterations (gradient norm {gnorm:g})")
    X_T = w
    u1 = float(p @ (u.U1(X_T) * X_T)) / x
    y = u1
    Y_T = u.U1(X_T)

    holdings = theta.reshape(model.nonleaf_ids.shape[0], model.d)
    X_proc = kernels.propagate_wealth(model.parent, model.srow, model.level_starts,
                                      model.prices, np.ascontiguousarray(holdings), x)
    # Y_t = E[X_T Y_T | node] / X_t from the martingale property of X Y
    prod = np.zeros(model.n)
    prod[model.leaf_ids] = p * X_T * Y_T
    prod = kernels.aggregate_up(model.parent, model.level_starts, prod)
    Y_proc = prod / (model.path_prob * X_proc)

    v = float(p @ conjugate_values(u, Y_T)[0])
    interior = bool(X_T.min() > 1e-8 * x and gnorm <= 1e-8 * (1.0 + abs(F)))
    return PrimalDualSolution(model=model, utility=u, x=x, y=y,
                              strategy=holdings, X=X_proc, Y=Y_proc,
                              u=F, u1=u1, v=v, v1=-x, interior=interior,
                              grad_norm=gnorm, iterations=it)


def solve_dual(model: MarketTree, u: UtilitySpec, y, tol=1e-11,
               bracket_hint=None) -> PrimalDualSolution:
    """Solve the dual problem at level y by inverting x -> u'(x)."""
    y = float(y)
    if y <= 0.0:
        raise SolverError("dual level must be positive")
    x0 = float(invert_marginal(u, y)[0]) if bracket_hint is None else bracket_hint
    cache = {}

    def u1_at(x):
        if x not in cache:
            cache[x] = solve_primal(model, u, x, tol=tol)
        return cache[x].u1

    lo, hi = x0, x0
    flo = u1_at(lo) - y
    fhi = flo
    for _ in range(200):
        if flo > 0.0:
            break
        lo /= 2.0
        flo = u1_at(lo) - y
    else:
        raise SolverError(f"dual level {y:g} unreachable on the trusted capital range")
    for _ in range(200):
        if fhi < 0.0:
            break
        hi *= 2.0
        fhi = u1_at(hi) - y
    else:
        raise SolverError(f"dual level {y:g} unreachable on the trusted capital range")
    if lo == hi:
        x_root = lo
    else:
        x_root = brentq(lambda x: u1_at(x) - y, lo, hi, xtol=1e-14 * x0, rtol=8.9e-16)
    sol = cache.get(x_root) or solve_primal(model, u, x_root, tol=tol)
    return sol


def first_order_audit(sol: PrimalDualSolution, model: MarketTree = None):
    """Variational-inequality residuals of a solved problem.

    For every spanning gain direction G the optimality of X requires
    E[U'(X_T) G] = 0 at interior optima, and E[U'(X_T) G] <= 0 along
    directions that remain feasible at active positivity constraints.
    Also reports the per-node martingale residual of the dual optimizer
    against each asset.
    """
    model = model or sol.model
    u = sol.utility
    span = terminal_gain_span(model)
    up = u.U1(sol.X_T)
    p = model.leaf_prob
    scale = float(p @ (up * np.abs(sol.X_T))) + 1e-300

    rows = []
    active = sol.X_T <= 1e-8 * sol.x
    for k in range(span.shape[1]):
        G = span[:, k]
        r = float(p @ (up * G))
        if not active.any():
            rows.append({"direction": k, "kind": "interior", "residual": r})
        else:
            for sgn in (1.0, -1.0):
                if np.all(sgn * G[active] >= -1e-14):
                    rows.append({"direction": k, "kind": "one_sided",
                                 "residual": sgn * r})
    max_interior = max((abs(r["residual"]) for r in rows if r["kind"] == "interior"),
                       default=0.0)
    max_onesided = max((r["residual"] for r in rows if r["kind"] == "one_sided"),
                       default=0.0)

    node_resid = 0.0
    for node in model.nonleaf_ids:
        kids = model.children[node]
        q = model.edge_prob[kids]
        dS = model.prices[kids] - model.prices[node]
        ynode = sol.Y[kids]
        r = q @ (ynode[:, None] * dS)
        denom = float(q @ (ynode[:, None] * np.abs(dS)).sum(axis=1)) + 1e-300
        node_resid = max(node_resid, float(np.abs(r).max()) / denom)

    return {"foc_max": max_interior / scale,
            "foc_one_sided_max": max_onesided / scale,
            "node_dual_max": node_resid,
            "rows": rows,
            "active_leaves": int(active.sum())}


def duality_audit(sol: PrimalDualSolution):
    """Residuals of the standing duality identities at the solved point."""
    model, u = sol.model, sol.utility
    p = model.leaf_prob
    eq11 = float(np.max(np.abs(u.U1(sol.X_T) - sol.Y_T)))
    xy = sol.x * sol.y
    eq50 = abs(float(p @ (sol.X_T * sol.Y_T)) - xy) / xy
    eq9 = abs(sol.u - xy - sol.v) / (1.0 + abs(sol.u))
    # P-supermartingale residual of Y, signed: positive values are violations
    acc = kernels.expected_child(model.parent, model.edge_prob, model.level_starts, sol.Y)
    gap = acc[model.nonleaf_ids] - sol.Y[model.nonleaf_ids]
    yscale = float(np.abs(sol.Y).max()) + 1e-300
    super_viol = float(np.max(gap)) / yscale
    mart_resid = float(np.max(np.abs(gap))) / yscale
    return {"eq11_leafwise": eq11,
            "eq50_product_moment": eq50,
            "eq9_conjugacy": eq9,
            "supermartingale_violation": super_viol,
            "y_martingale_residual": mart_resid}


def value_curve(model: MarketTree, u: UtilitySpec, x_grid, tol=1e-11):
    """Independent primal solves over a capital grid, with monotonicity checks."""
    x_grid = np.asarray(x_grid, dtype=float)
    if np.any(x_grid <= 0.0):
        raise SolverError("capital grid must be positive")
    samples = []
    warm = None
    for x in np.sort(x_grid):
        sol = solve_primal(model, u, float(x), tol=tol, warm_start=warm)
        warm = sol.strategy
        samples.append((float(x), sol.u, sol.u1))
    us = np.array([s[1] for s in samples])
    u1s = np.array([s[2] for s in samples])
    return {"samples": samples,
            "u_increasing": bool(np.all(np.diff(us) > 0.0)) if len(samples) > 1 else True,
            "u1_decreasing": bool(np.all(np.diff(u1s) < 0.0)) if len(samples) > 1 else True}
