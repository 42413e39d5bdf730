"""Command-line entry point and report machinery.

Subcommands: validate, solve, audit, sense, atlas.  Every run produces a
machine-first JSON report (all residuals by name, echoed inputs, package
versions) from which the text table is rendered; reports are byte-identical
across runs with identical inputs.  Exit codes: 0 all asserted invariants
pass, 2 invariant failure, 3 model or utility error, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__, atlas
from .sensitivity import (DEFAULT_FD_LADDER, SensitivityError, fd_oracle,
                          numeraire_rank_report, sensitivity)
from .solver import (SolverError, duality_audit, first_order_audit,
                     solve_primal, value_curve)
from .tree import (ArbitrageCertificate, ModelError, find_martingale_measure,
                   load_model, validate_model_document, validate_tree)
from .utility import UtilityError, load_utility

# default tolerance per named residual; overridable with --tol name=value
TOLERANCES = {
    "foc_max": 1e-9,
    "foc_one_sided_max": 1e-9,
    "node_dual_max": 1e-9,
    "eq11_leafwise": 1e-12,
    "eq50_product_moment": 1e-10,
    "eq9_conjugacy": 1e-9,
    "supermartingale_violation": 1e-9,
    "sum_R": 1e-12,
    "ab_reciprocity": 1e-10,
    "eq40_proportionality": 1e-10,
    "eq30_u2": 1e-9,
    "eq31_v2": 1e-9,
    "eq32_cross": 1e-9,
    "lemma5_conjugate_curvature": 1e-9,
    "orth_alpha": 1e-10,
    "orth_beta": 1e-10,
    "orth_alphabeta": 1e-10,
    "foc_witness": 1e-9,
    "dims_complementarity": 0.5,
    "mart_XYp": 1e-9,
    "mart_XpY": 1e-9,
    "mart_XpYp": 1e-9,
    "fd_u2_agreement": 1e-4,
    "fd_Xp_agreement": 1e-3,
    "fd_Yp_agreement": 1e-3,
    "atlas_foc_buy_and_hold": 1e-10,
    "atlas_xp_error": 1e-9,
    "atlas_fprime_residual": 1e-9,
    "atlas_moment_residual": 1e-10,
}

# residuals that must be strictly positive margins rather than small
POSITIVE_MARGINS = {"corridor_a_low", "corridor_a_high",
                    "corridor_b_low", "corridor_b_high",
                    "atlas_gap", "atlas_q_plus_margin", "atlas_q_minus_margin",
                    "atlas_separation_margin", "atlas_div1_monotone",
                    "atlas_div2_monotone", "atlas_prob_xp_negative"}


class InvariantFailure(RuntimeError):
    pass


def _tol_overrides(pairs):
    out = dict(TOLERANCES)
    for spec in pairs or ():
        name, _, val = spec.partition("=")
        if not val:
            raise ModelError(f"--tol expects name=value, got {spec!r}")
        out[name.strip()] = float(val)
    return out


def _residual_rows(values, tols):
    rows = {}
    for name, value in values.items():
        if name in POSITIVE_MARGINS:
            rows[name] = {"value": float(value), "tol": 0.0,
                          "kind": "margin", "pass": bool(value > 0.0)}
        else:
            tol = tols.get(name)
            rows[name] = {"value": float(value),
                          "tol": tol if tol is not None else None,
                          "kind": "residual",
                          "pass": bool(tol is None or abs(value) <= tol)}
    return rows


def render_table(report):
    """Aligned plain-text residual table with deterministic ordering."""
    lines = [f"treesense {report['command']} report (schema {report['schema']})"]
    rows = report.get("residuals", {})
    name_w = max([len(n) for n in rows] + [8])
    lines.append(f"{'residual'.ljust(name_w)}  {'value':>13}  {'tolerance':>10}  status")
    for name in sorted(rows):
        r = rows[name]
        tol = "> 0" if r["kind"] == "margin" else (
            f"{r['tol']:.1e}" if r["tol"] is not None else "report")
        status = "PASS" if r["pass"] else "FAIL"
        lines.append(f"{name.ljust(name_w)}  {r['value']:>13.4e}  {tol:>10}  {status}")
    if not rows:
        lines.append("(no residuals)")
    for extra in report.get("tables", ()):
        lines.append("")
        lines.append(extra["title"])
        for row in extra["rows"]:
            lines.append("  " + "  ".join(str(v) for v in row))
    return "\n".join(lines)


def _emit(report, path):
    text = render_table(report)
    print(text)
    if path:
        with open(path, "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _base_report(command, args_echo):
    return {"schema": 1, "command": command, "inputs": args_echo,
            "versions": {"treesense": __version__, "numpy": np.__version__}}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_validate(args, tols):
    with open(args.model) as fh:
        doc = json.load(fh)
    rep = validate_model_document(doc)
    report = _base_report("validate", {"model": args.model})
    report["violations"] = rep.violations
    report["residuals"] = {"model_violations": {
        "value": float(len(rep.violations)), "tol": 0.0, "kind": "residual",
        "pass": rep.ok}}
    if rep.violations:
        report["tables"] = [{"title": "violations",
                             "rows": [[v] for v in rep.violations]}]
    if rep.ok:
        model = load_model(args.model)
        q = find_martingale_measure(model)
        if isinstance(q, ArbitrageCertificate):
            report["arbitrage"] = {"node": model.labels[q.node],
                                   "direction": list(q.direction)}
            report["residuals"]["martingale_measure"] = {
                "value": 0.0, "tol": 0.0, "kind": "residual", "pass": False}
        else:
            report["martingale_measure"] = [float(v) for v in q]
    _emit(report, args.report)
    if not rep.ok or "arbitrage" in report:
        raise ModelError("model failed validation")
    return report


def _load_pair(args):
    model = load_model(args.model)
    rep = validate_tree(model)
    if not rep.ok:
        raise ModelError("; ".join(rep.violations))
    u = load_utility(args.utility)
    q = find_martingale_measure(model)
    if isinstance(q, ArbitrageCertificate):
        raise ModelError(
            f"model admits arbitrage at node {model.labels[q.node]} "
            f"(direction {np.array2string(q.direction, precision=6)})")
    return model, u


def _solution_payload(sol):
    return {"x": sol.x, "y": sol.y, "u": sol.u, "u1": sol.u1,
            "v": sol.v, "v1": sol.v1, "interior": sol.interior,
            "iterations": sol.iterations, "grad_norm": sol.grad_norm,
            "strategy": [[float(h) for h in row] for row in sol.strategy],
            "X_T": [float(v) for v in sol.X_T],
            "Y_T": [float(v) for v in sol.Y_T]}


def _cmd_solve(args, tols):
    model, u = _load_pair(args)
    sol = solve_primal(model, u, args.capital)
    values = dict(duality_audit(sol))
    report = _base_report("solve", {"model": args.model, "utility": args.utility,
                                    "capital": args.capital,
                                    "grid": args.grid})
    report["solution"] = _solution_payload(sol)
    if args.grid:
        curve = value_curve(model, u, args.grid)
        report["value_curve"] = curve["samples"]
        values["u_monotone"] = 0.0 if curve["u_increasing"] else 1.0
        values["u1_monotone"] = 0.0 if curve["u1_decreasing"] else 1.0
    report["residuals"] = _residual_rows(values, tols)
    _emit(report, args.report)
    return report


def _cmd_audit(args, tols):
    model, u = _load_pair(args)
    sol = solve_primal(model, u, args.capital)
    values = dict(duality_audit(sol))
    audit = first_order_audit(sol, model)
    values["foc_max"] = audit["foc_max"]
    values["foc_one_sided_max"] = audit["foc_one_sided_max"]
    values["node_dual_max"] = audit["node_dual_max"]
    report = _base_report("audit", {"model": args.model, "utility": args.utility,
                                    "capital": args.capital})
    report["solution"] = _solution_payload(sol)
    report["active_leaves"] = audit["active_leaves"]
    report["residuals"] = _residual_rows(values, tols)
    _emit(report, args.report)
    return report


def _cmd_sense(args, tols):
    model, u = _load_pair(args)
    sol = solve_primal(model, u, args.capital)
    rep = sensitivity(model, sol)
    values = dict(rep.residuals)
    values.update(duality_audit(sol))
    audit = first_order_audit(sol, model)
    values["foc_max"] = audit["foc_max"]
    values["node_dual_max"] = audit["node_dual_max"]
    report = _base_report("sense", {"model": args.model, "utility": args.utility,
                                    "capital": args.capital,
                                    "fd_ladder": args.fd_ladder})
    report["solution"] = _solution_payload(sol)
    report["sensitivity"] = {
        "a": rep.a, "b": rep.b, "u2": rep.u2, "v2": rep.v2,
        "dim_gain": rep.dim_gain, "dim_complement": rep.dim_complement,
        "alpha_hat": [float(v) for v in rep.alpha_hat],
        "beta_hat": [float(v) for v in rep.beta_hat],
        "Xp_T": [float(v) for v in rep.Xp_T],
        "Yp_T": [float(v) for v in rep.Yp_T]}
    report["numeraire_ranks"] = numeraire_rank_report(model, sol)["rows"]
    if args.fd_ladder:
        fd = fd_oracle(model, u, args.capital, ladder=args.fd_ladder,
                       u2_hint=rep.u2)
        values["fd_u2_agreement"] = abs(rep.u2 - fd.u2_fd) / max(
            abs(rep.u2), 1e-300)
        values["fd_Xp_agreement"] = float(np.max(
            np.abs(rep.Xp_T - fd.Xp_fd) / (1.0 + np.abs(rep.Xp_T))))
        values["fd_Yp_agreement"] = float(np.max(
            np.abs(rep.Yp_T - fd.Yp_fd) / (1.0 + np.abs(rep.Yp_T))))
        report["fd"] = {"u2_fd": fd.u2_fd, "error_estimate": fd.u2_fd_error,
                        "expansion_slope": fd.expansion_slope,
                        "richardson_monotone": fd.richardson_monotone}
        tols = dict(tols)
        tols["fd_u2_agreement"] = max(tols["fd_u2_agreement"],
                                      10.0 * fd.u2_fd_error / max(abs(rep.u2), 1e-300))
    report["residuals"] = _residual_rows(values, tols)
    _emit(report, args.report)
    return report


def _atlas_values(example, ladder):
    values = {}
    tables = []
    if example == 1:
        vals = [lvl.diagnostics["div1"] for lvl in ladder.levels]
        values["atlas_div1_monotone"] = float(min(np.diff(vals))) if len(vals) > 1 else 1.0
        if len(vals) >= 3:
            rep = atlas.divergence_report(ladder, "div1")
            values["atlas_div1_exponent_error"] = abs(rep["exponent"] - 3.0)
            tables.append({"title": "div1 ladder (N, value, exponent %.3f)" % rep["exponent"],
                           "rows": [[n, f"{v:.6g}"] for n, v in ladder.values("div1")]})
    elif example == 2:
        foc = max(lvl.diagnostics["foc_buy_and_hold"] for lvl in ladder.levels)
        values["atlas_foc_buy_and_hold"] = foc
        vals = [lvl.diagnostics["div2_at_1"] for lvl in ladder.levels]
        values["atlas_div2_monotone"] = float(min(-np.diff(vals))) if len(vals) > 1 else 1.0
        tables.append({"title": "div2(N, a=1) ladder",
                       "rows": [[lvl.N, f"{lvl.diagnostics['div2_at_1']:.6g}"]
                                for lvl in ladder.levels]})
    elif example == 3:
        for lvl in ladder.levels:
            d = lvl.diagnostics
            allow = 0.05 * d["gap"]
            values["atlas_gap"] = d["gap"]
            values["atlas_fprime_residual"] = abs(d["fprime_half"])
            for q in d["quotients"]:
                values["atlas_q_plus_margin"] = min(
                    values.get("atlas_q_plus_margin", np.inf),
                    q["q_plus"] - (d["f_half"] - allow))
                values["atlas_q_minus_margin"] = min(
                    values.get("atlas_q_minus_margin", np.inf),
                    (d["f_one"] + allow) - q["q_minus"])
                values["atlas_separation_margin"] = min(
                    values.get("atlas_separation_margin", np.inf),
                    (q["q_plus"] - q["q_minus"]) - 0.9 * d["gap"])
            tables.append({"title": f"example 3 quotients at N={lvl.N} "
                                    f"(f(1/2)={d['f_half']:.6f}, f(1)={d['f_one']:.6f})",
                           "rows": [[f"eps={q['eps']:.5f}", f"q+={q['q_plus']:.6f}",
                                     f"q-={q['q_minus']:.6f}"] for q in d["quotients"]]})
    elif example == 4:
        d = ladder.levels[0].diagnostics
        values["atlas_xp_error"] = d["xp_error"]
        values["atlas_fprime_residual"] = abs(d["fprime_at_4_3"])
        values["atlas_moment_residual"] = abs(d["moment_residual"])
        values["atlas_prob_xp_negative"] = d["prob_xp_negative"]
        values["foc_max"] = d["foc_max"]
        for k, v in d["residuals"].items():
            if isinstance(v, float):
                values[k] = v
        tables.append({"title": "marginal investment per state (price, engine, paper)",
                       "rows": [[s, f"{e:.12f}", f"{p:.12f}"] for s, e, p in
                                zip(atlas.EX4_SUPPORT, d["xp_table"], d["xp_paper"])]})
    return values, tables


def _cmd_atlas(args, tols):
    levels = args.levels if args.levels else None
    ladder = atlas.build_ladder(args.example, levels=levels)
    values, tables = _atlas_values(args.example, ladder)
    report = _base_report("atlas", {"example": args.example,
                                    "levels": [lvl.N for lvl in ladder.levels]})
    report["diagnostics"] = [
        {"N": lvl.N, **{k: v for k, v in lvl.diagnostics.items()
                        if isinstance(v, (int, float, bool, str, list, dict))}}
        for lvl in ladder.levels]
    report["residuals"] = _residual_rows(values, tols)
    report["tables"] = tables
    _emit(report, args.report)
    return report


# ---------------------------------------------------------------------------

def _float_list(text):
    return [float(v) for v in text.replace(",", " ").split()]


def build_parser():
    p = argparse.ArgumentParser(prog="treesense",
                                description="Second-order sensitivities of optimal "
                                            "investment on finite event trees")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, utility=True, capital=True):
        sp.add_argument("--model", required=True, help="model JSON file")
        if utility:
            sp.add_argument("--utility", required=True, help="utility JSON file")
        if capital:
            sp.add_argument("--capital", type=float, required=True)
        sp.add_argument("--tol", action="append", metavar="NAME=VALUE",
                        help="override a named tolerance")
        sp.add_argument("--report", help="write the JSON report here")

    sp = sub.add_parser("validate", help="check model invariants and no-arbitrage")
    sp.add_argument("--model", required=True)
    sp.add_argument("--tol", action="append", metavar="NAME=VALUE")
    sp.add_argument("--report")

    sp = sub.add_parser("solve", help="solve the primal problem")
    common(sp)
    sp.add_argument("--grid", type=_float_list,
                    help="capital grid for a value-curve sweep")

    sp = sub.add_parser("audit", help="solve plus first-order and duality audits")
    common(sp)

    sp = sub.add_parser("sense", help="full second-order sensitivity report")
    common(sp)
    sp.add_argument("--fd-ladder", type=_float_list, default=None,
                    help="relative steps for the finite-difference oracle, "
                         f"e.g. '{' '.join(str(d) for d in DEFAULT_FD_LADDER)}'")

    sp = sub.add_parser("atlas", help="counterexample truncation ladders")
    sp.add_argument("--example", type=int, required=True, choices=(1, 2, 3, 4))
    sp.add_argument("--levels", type=lambda s: [int(v) for v in
                                                s.replace(",", " ").split()])
    sp.add_argument("--tol", action="append", metavar="NAME=VALUE")
    sp.add_argument("--report")
    return p


COMMANDS = {"validate": _cmd_validate, "solve": _cmd_solve, "audit": _cmd_audit,
            "sense": _cmd_sense, "atlas": _cmd_atlas}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        tols = _tol_overrides(args.tol)
        report = COMMANDS[args.command](args, tols)
    except (ModelError, UtilityError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 4
    except SensitivityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    rows = report.get("residuals", {})
    return 0 if all(r["pass"] for r in rows.values()) else 2


def main():  # console entry point
    sys.exit(run())


if __name__ == "__main__":
    main()
