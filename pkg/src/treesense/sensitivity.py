"""Second-order sensitivity machinery on finite trees.

Around an interior optimum the engine tilts the physical measure by the
normalized product of the optimal wealth and the dual optimizer, splits
the terminal zero-mean square-integrable space under that measure into
the attainable-gain subspace (gains under the optimal-wealth numeraire)
and its orthogonal complement, and solves one weighted least-squares
projection on each side.  The two projection values are reciprocal, give
the curvature of both value functions, and their optimizers assemble the
derivative wealth and deflator processes.  Everything is cross-checked by
a finite-difference ladder with Richardson extrapolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import kernels
from .solver import PrimalDualSolution, solve_dual, solve_primal
from .tree import MarketTree, conditional_expectation, terminal_gain_span
from .utility import UtilitySpec, conjugate_values


class SensitivityError(RuntimeError):
    pass


@dataclass
class SubspaceBasis:
    vectors: np.ndarray            # (n_leaves, dim), orthonormal columns
    metric: np.ndarray             # leaf weights of the risk-adjusted measure
    orthonormalized: bool = True

    @property
    def dim(self):
        return self.vectors.shape[1]


@dataclass
class SensitivityReport:
    a: float
    b: float
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    M_proc: np.ndarray
    N_proc: np.ndarray
    Xp: np.ndarray                 # derivative wealth process, per node
    Yp: np.ndarray                 # derivative deflator process, per node
    Xp_T: np.ndarray
    Yp_T: np.ndarray
    u2: float
    v2: float
    dim_gain: int
    dim_complement: int
    residuals: dict = field(default_factory=dict)


def risk_measure(sol: PrimalDualSolution) -> np.ndarray:
    """Leaf weights p_i X_T,i Y_T,i / (x y); a probability by construction."""
    if not sol.interior:
        raise SensitivityError("risk-adjusted measure needs an interior solution")
    r = sol.model.leaf_prob * sol.X_T * sol.Y_T / (sol.x * sol.y)
    if abs(float(r.sum()) - 1.0) > 1e-12:
        raise SensitivityError(f"risk measure does not normalize: sum = {r.sum()!r}")
    return r


def gain_subspace(model: MarketTree, sol: PrimalDualSolution, r) -> SubspaceBasis:
    """Orthonormal basis of attainable terminal gains under the X(x) numeraire.

    Raw directions are the one-period gain vectors of the original model
    divided leafwise by the optimal terminal wealth; each has mean zero
    under the risk-adjusted measure because E[Y_T G_T] = 0 at an interior
    optimum.  Modified Gram-Schmidt with re-orthogonalization drops
    directions whose projected norm falls below 1e-10 of their entry norm.
    """
    if not sol.interior:
        raise SensitivityError("gain subspace needs an interior solution")
    raw = terminal_gain_span(model) / sol.X_T[:, None]
    means = r @ raw
    foc_witness = float(np.max(np.abs(means))) if raw.size else 0.0
    raw = raw - means[None, :]      # remove the solver's first-order residual

    kept = []
    for k in range(raw.shape[1]):
        v = raw[:, k].copy()
        norm0 = float(np.sqrt(r @ (v * v)))
        if norm0 <= 1e-14:
            continue
        for _ in range(2):
            for b in kept:
                v -= float(r @ (v * b)) * b
        norm1 = float(np.sqrt(r @ (v * v)))
        if norm1 <= 1e-10 * norm0:
            continue
        kept.append(v / norm1)
    vectors = np.column_stack(kept) if kept else np.zeros((model.n_leaves, 0))
    basis = SubspaceBasis(vectors=vectors, metric=r)
    basis.foc_witness = foc_witness
    basis.mean_abs_max = float(np.max(np.abs(r @ vectors))) if kept else 0.0
    return basis


def orthocomplement(basis: SubspaceBasis, r=None) -> SubspaceBasis:
    """Orthonormal complement of the basis inside the zero-mean L2 space.

    Works in whitened coordinates where the metric is Euclidean: the
    complement is the null space of the rows spanned by the constant
    direction and the basis vectors, read off an SVD.
    """
    r = basis.metric if r is None else r
    sq = np.sqrt(r)
    rows = [sq]
    for k in range(basis.dim):
        rows.append(basis.vectors[:, k] * sq)
    M = np.vstack(rows)
    _, sv, vt = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(sv > 1e-12 * (sv[0] if sv.size else 1.0)))
    null = vt[rank:]
    comp = (null / sq[None, :]).T
    # re-normalize under the metric (columns are orthonormal by construction)
    for k in range(comp.shape[1]):
        comp[:, k] /= np.sqrt(r @ (comp[:, k] ** 2))
    return SubspaceBasis(vectors=comp, metric=r)


def quad_project(basis: SubspaceBasis, weights, r=None):
    """Minimize E_r[w (1 + m)^2] over m in the span of the basis.

    Solves the normal equations (G' W G) c = -G' W 1 with W the diagonal
    of metric times weights.  Returns (value, optimizer, coefficients).
    """
    r = basis.metric if r is None else r
    w = np.asarray(weights, dtype=float)
    if np.any(w <= 0.0):
        raise SensitivityError("projection weights must be strictly positive")
    G = basis.vectors
    if G.shape[1] == 0:
        value = float(r @ w)
        return value, np.zeros_like(w), np.zeros(0)
    W = r * w
    A = (G * W[:, None]).T @ G
    rhs = -(G.T @ W)
    try:
        c = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:  # impossible after orthonormalization
        raise AssertionError("singular normal matrix in quad_project") from exc
    m = G @ c
    value = float(r @ (w * (1.0 + m) ** 2))
    return value, m, c


def _cond_expectation_process(model, r, terminal):
    return conditional_expectation(terminal, r, model)


def sensitivity(model: MarketTree, sol: PrimalDualSolution,
                u: UtilitySpec = None) -> SensitivityReport:
    """Full second-order report with every identity residual by name."""
    u = u or sol.utility
    if not sol.interior:
        raise SensitivityError(
            "sensitivity needs an interior solution; route boundary regimes "
            "to the counterexample atlas diagnostics")
    x, y = sol.x, sol.y
    p = model.leaf_prob
    r = risk_measure(sol)

    zeta = -sol.X_T * u.U2(sol.X_T) / u.U1(sol.X_T)
    c1, c2 = u.corridor
    if np.any(zeta <= c1) or np.any(zeta >= c2):
        raise SensitivityError(
            f"risk aversion at terminal wealth leaves the corridor "
            f"({c1:g}, {c2:g}): range [{zeta.min():g}, {zeta.max():g}]")
    eta = 1.0 / zeta

    basis_a = gain_subspace(model, sol, r)
    basis_b = orthocomplement(basis_a)
    a_val, alpha, _ = quad_project(basis_a, zeta)
    b_val, beta, _ = quad_project(basis_b, eta)

    M_proc = _cond_expectation_process(model, r, alpha)
    N_proc = _cond_expectation_process(model, r, beta)
    Xp = sol.X / x * (1.0 + M_proc)
    Yp = sol.Y / y * (1.0 + N_proc)
    Xp_T = Xp[model.leaf_ids]
    Yp_T = Yp[model.leaf_ids]
    u2 = -sol.u1 / x * a_val
    v2 = x / y * b_val            # -v'(y)/y * b with v'(y) = -x

    res = {}
    res["sum_R"] = abs(float(r.sum()) - 1.0)
    res["ab_reciprocity"] = abs(a_val * b_val - 1.0)
    res["corridor_a_low"] = a_val - c1       # must be > 0
    res["corridor_a_high"] = c2 - a_val      # must be > 0
    res["corridor_b_low"] = b_val - 1.0 / c2
    res["corridor_b_high"] = 1.0 / c1 - b_val
    res["eq40_proportionality"] = float(
        np.max(np.abs(zeta * (1.0 + alpha) - a_val * (1.0 + beta)))) / a_val
    res["eq30_u2"] = abs(u2 - float(p @ (u.U2(sol.X_T) * Xp_T ** 2))) / abs(u2)
    V2 = conjugate_values(u, sol.Y_T)[2]
    res["eq31_v2"] = abs(v2 - float(p @ (V2 * Yp_T ** 2))) / abs(v2)
    res["eq32_cross"] = float(
        np.max(np.abs(u.U2(sol.X_T) * Xp_T - u2 * Yp_T))) / (abs(u2) * float(np.max(np.abs(Yp_T))) + 1e-300)
    res["lemma5_conjugate_curvature"] = abs(v2 + 1.0 / u2) / abs(v2)
    res["orth_alpha"] = abs(float(r @ alpha))
    res["orth_beta"] = abs(float(r @ beta))
    res["orth_alphabeta"] = abs(float(r @ (alpha * beta)))
    res["foc_witness"] = getattr(basis_a, "foc_witness", 0.0)
    res["dims_complementarity"] = abs(
        basis_a.dim + basis_b.dim - (model.n_leaves - 1))

    rep = SensitivityReport(a=a_val, b=b_val, alpha_hat=alpha, beta_hat=beta,
                            M_proc=M_proc, N_proc=N_proc, Xp=Xp, Yp=Yp,
                            Xp_T=Xp_T, Yp_T=Yp_T, u2=u2, v2=v2,
                            dim_gain=basis_a.dim, dim_complement=basis_b.dim,
                            residuals=res)
    res.update(martingale_audit(sol, rep))
    return rep


def martingale_audit(sol: PrimalDualSolution, rep: SensitivityReport):
    """Node residuals of the three derivative-process martingales."""
    model = sol.model
    out = {}
    for name, proc in (("mart_XYp", sol.X * rep.Yp),
                       ("mart_XpY", rep.Xp * sol.Y),
                       ("mart_XpYp", rep.Xp * rep.Yp)):
        acc = kernels.expected_child(model.parent, model.edge_prob,
                                     model.level_starts, proc)
        gap = acc[model.nonleaf_ids] - proc[model.nonleaf_ids]
        scale = float(np.abs(proc).max()) + 1e-300
        out[name] = float(np.max(np.abs(gap))) / scale
    return out


def numeraire_rank_report(model: MarketTree, sol: PrimalDualSolution):
    """Per-node rank of the one-step increments of (1/X, S/X).

    Flags nodes where the discounted securities are linearly redundant
    (rank below the number of price columns) or fully degenerate.
    """
    X = sol.X
    rows = []
    for node in model.nonleaf_ids:
        kids = model.children[node]
        disc = np.column_stack([1.0 / X[kids], model.prices[kids] / X[kids, None]])
        base = np.concatenate([[1.0 / X[node]], model.prices[node] / X[node]])
        inc = disc - base[None, :]
        sv = np.linalg.svd(inc, compute_uv=False)
        scale = sv[0] if sv.size and sv[0] > 0 else 1.0
        rank = int(np.sum(sv > 1e-10 * scale))
        rows.append({"node": model.labels[node], "rank": rank,
                     "columns": model.d + 1,
                     "redundant": rank < model.d + 1,
                     "degenerate": rank == 0})
    return {"rows": rows,
            "min_rank": min((r["rank"] for r in rows), default=0),
            "any_redundant": any(r["redundant"] for r in rows)}


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

DEFAULT_FD_LADDER = (1e-2, 5e-3, 2.5e-3)


@dataclass
class FdOracle:
    u2_fd: float
    u2_fd_error: float
    Xp_fd: np.ndarray
    Yp_fd: np.ndarray
    expansion_slope: float
    richardson_monotone: bool
    table: list


def fd_oracle(model: MarketTree, u: UtilitySpec, x, ladder=DEFAULT_FD_LADDER,
              u2_hint=None, solver_tol=1e-13, dual=True) -> FdOracle:
    """Finite-difference derivatives of u, X_T and Y_T around x.

    Central second differences of the primal value over x(1 +- delta) are
    Richardson-extrapolated down the ladder; terminal-wealth derivatives
    use central first differences at the two finest steps.  The dual-side
    ladder runs through the dual solver at y(1 +- delta).  A non-monotone
    Richardson table signals that solver noise dominates the steps.
    """
    x = float(x)
    deltas = np.sort(np.asarray(ladder, dtype=float))[::-1]
    if deltas.size < 2:
        raise SensitivityError("the finite-difference ladder needs at least 2 steps")
    base = solve_primal(model, u, x, tol=solver_tol)
    y = base.y

    up_sols, dn_sols = [], []
    for d in deltas:
        up_sols.append(solve_primal(model, u, x * (1.0 + d), tol=solver_tol,
                                    warm_start=base.strategy))
        dn_sols.append(solve_primal(model, u, x * (1.0 - d), tol=solver_tol,
                                    warm_start=base.strategy))

    second = np.array([(up.u - 2.0 * base.u + dn.u) / (x * d) ** 2
                       for up, dn, d in zip(up_sols, dn_sols, deltas)])
    u2_fd, u2_err, table = _neville_to_zero(deltas ** 2, second)
    diffs = np.abs(np.diff(second))
    monotone = bool(np.all(np.diff(diffs) <= 0.0)) if diffs.size > 1 else True

    quots = np.stack([(up.X_T - dn.X_T) / (2.0 * x * d)
                      for up, dn, d in zip(up_sols, dn_sols, deltas)])
    Xp_fd = _neville_to_zero_vec(deltas[-2:] ** 2, quots[-2:])

    Yp_fd = None
    if dual:
        yq = []
        for d in deltas[-2:]:
            hi = solve_dual(model, u, y * (1.0 + d), tol=solver_tol, bracket_hint=base.x)
            lo = solve_dual(model, u, y * (1.0 - d), tol=solver_tol, bracket_hint=base.x)
            yq.append((u.U1(hi.X_T) - u.U1(lo.X_T)) / (2.0 * y * d))
        Yp_fd = _neville_to_zero_vec(deltas[-2:] ** 2, np.stack(yq))

    # quadratic-expansion check: residual of the Taylor model should fall
    # at a cubic-or-better rate in the step
    u2_ref = u2_hint if u2_hint is not None else u2_fd
    eps, resid = [], []
    for sol0, d, s in [(s_, d_, +1.0) for s_, d_ in zip(up_sols, deltas)] + \
                      [(s_, d_, -1.0) for s_, d_ in zip(dn_sols, deltas)]:
        e = sol0.x - x
        eps.append(e)
        resid.append(abs(sol0.u - base.u - base.u1 * e - 0.5 * u2_ref * e * e))
    eps, resid = np.asarray(eps), np.asarray(resid)
    good = resid > 1e-14 * (1.0 + abs(base.u))
    if good.sum() >= 3:
        slope = float(np.polyfit(np.log(np.abs(eps[good])), np.log(resid[good]), 1)[0])
    else:
        slope = 3.0  # residuals at solver noise floor: expansion is exact
    return FdOracle(u2_fd=u2_fd, u2_fd_error=float(u2_err), Xp_fd=Xp_fd,
                    Yp_fd=Yp_fd, expansion_slope=slope,
                    richardson_monotone=monotone, table=table)


def _neville_to_zero(x, vals):
    """Polynomial extrapolation of vals(x) to x = 0 with an error estimate."""
    n = x.shape[0]
    T = [np.asarray(vals, dtype=float)]
    for k in range(1, n):
        prev = T[-1]
        cur = np.empty(n - k)
        for i in range(n - k):
            cur[i] = (x[i] * prev[i + 1] - x[i + k] * prev[i]) / (x[i] - x[i + k])
        T.append(cur)
    best = float(T[-1][0])
    err = abs(best - float(T[-2][0])) if n > 1 else np.inf
    return best, err, [list(c) for c in T]


def _neville_to_zero_vec(x, rows):
    """Two-point Richardson for vector-valued quotients."""
    if rows.shape[0] == 1:
        return rows[0]
    x0, x1 = x[0], x[1]
    return (x0 * rows[1] - x1 * rows[0]) / (x0 - x1)


# ---------------------------------------------------------------------------
# exact rational projection (verification helper)
# ---------------------------------------------------------------------------

def _solve_fraction_system(A, b):
    n = len(b)
    M = [row[:] + [b[i]] for i, row in enumerate(A)]
    for col in range(n):
        piv = next(r for r in range(col, n) if M[r][col] != 0)
        M[col], M[piv] = M[piv], M[col]
        inv = Fraction(1, 1) / M[col][col]
        M[col] = [v * inv for v in M[col]]
        for r in range(n):
            if r != col and M[r][col] != 0:
                f = M[r][col]
                M[r] = [vr - f * vc for vr, vc in zip(M[r], M[col])]
    return [M[r][n] for r in range(n)]


def quad_project_exact(basis_vectors, weights, measure):
    """Rational-arithmetic twin of :func:`quad_project` for fixture checks.

    ``basis_vectors`` is a list of leaf vectors (not necessarily
    orthonormal), ``weights`` and ``measure`` are per-leaf Fractions.
    """
    vecs = [[Fraction(v) for v in col] for col in basis_vectors]
    w = [Fraction(v) for v in weights]
    r = [Fraction(v) for v in measure]
    W = [ri * wi for ri, wi in zip(r, w)]
    m = len(vecs)
    if m == 0:
        val = sum(Wi for Wi in W)
        return val, [Fraction(0)] * len(w)
    A = [[sum(Wi * gi * hj for Wi, gi, hj in zip(W, vecs[i], vecs[j]))
          for j in range(m)] for i in range(m)]
    b = [-sum(Wi * gi for Wi, gi in zip(W, vecs[i])) for i in range(m)]
    c = _solve_fraction_system(A, b)
    alpha = [sum(c[k] * vecs[k][i] for k in range(m)) for i in range(len(w))]
    value = sum(Wi * (1 + ai) ** 2 for Wi, ai in zip(W, alpha))
    return value, alpha
