"""Command-line front end: solve, evaluate, sparsify, certify, dump.

Reports are JSON with floats at 17 significant digits (lossless on
re-parse) and deterministic key order; stepsize tables can additionally be
emitted as CSV siblings.  Exit codes: 0 success, 2 invalid arguments,
3 solver failure, 4 limit reached (bounds are still emitted).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from . import __version__
from .gram import Basis, Preset, StepsizeSchedule, stepsize_convert
from .inner import ProblemSpec, evaluate_worst_case
from .presets import (
    make_problem,
    potential_certificate,
    solve_potential_chain,
)
from .qcqp import build_bnbpep_qcqp, compute_variable_bounds, standard_form_counts

EXIT_OK = 0
EXIT_BAD_ARGS = 2
EXIT_SOLVER = 3
EXIT_LIMIT = 4

_STAR_KEY = "star"


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _format_value(v, indent, cur):
    pad = " " * (cur + indent)
    if isinstance(v, dict):
        if not v:
            return "{}"
        items = ",\n".join(
            f'{pad}"{k}": {_format_value(val, indent, cur + indent)}'
            for k, val in v.items()
        )
        return "{\n" + items + "\n" + " " * cur + "}"
    if isinstance(v, (list, tuple)):
        seq = list(v)
        if not seq:
            return "[]"
        items = ",\n".join(
            f"{pad}{_format_value(x, indent, cur + indent)}" for x in seq
        )
        return "[\n" + items + "\n" + " " * cur + "]"
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, (float, np.floating)):
        if np.isnan(v):
            return "NaN"
        if np.isinf(v):
            return "Infinity" if v > 0 else "-Infinity"
        return f"{float(v):.17g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return json.dumps(v)


def dumps_report(report: dict, indent: int = 2) -> str:
    return _format_value(report, indent, 0) + "\n"


def write_report(report: dict, path: str, csv_tables: bool = False) -> None:
    """Persist a report; optionally emit CSV siblings for stepsize tables."""
    with open(path, "w") as fh:
        fh.write(dumps_report(report))
    if not csv_tables:
        return
    for name, sched in report.get("schedules", {}).items():
        rows = sched.get("values")
        if rows is None:
            continue
        n = len(rows)
        sib = path.rsplit(".", 1)[0] + f".{name}.csv"
        with open(sib, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"j={j}" for j in range(n)])
            for r in rows:
                writer.writerow([f"{v:.17g}" for v in list(r) + [0.0] * (n - len(r))])


def read_report(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _schedule_dict(sched: StepsizeSchedule) -> dict:
    return {
        "basis": sched.basis.value,
        "N": sched.N,
        "values": [list(r) for r in sched.rows],
    }


def _schedules_all_bases(spec: ProblemSpec, sched: StepsizeSchedule) -> dict:
    out = {}
    if spec.preset is Preset.WC_POTENTIAL:
        out["h"] = _schedule_dict(sched)
        return out
    if sched.class_params is None:
        sched = StepsizeSchedule(sched.N, sched.basis, sched.rows,
                                 (spec.mu, spec.L))
    for basis in (Basis.H, Basis.HBAR, Basis.ALPHA):
        out[basis.value] = _schedule_dict(stepsize_convert(sched, basis))
    return out


def _certificate_dict(cert) -> dict:
    def key(i):
        return _STAR_KEY if not isinstance(i, int) else i

    return {
        "lambda": {f"{key(i)},{key(j)}": v for (i, j), v in sorted(
            cert.lambdas.items(), key=lambda kv: str(kv[0]))},
        "nu": cert.nu,
        "tau": {str(key(i)): v for i, v in sorted(cert.tau.items(),
                                                  key=lambda kv: str(kv[0]))},
        "eta": {str(key(i)): v for i, v in sorted(cert.eta.items(),
                                                  key=lambda kv: str(kv[0]))},
        "Z": [list(map(float, row)) for row in np.asarray(cert.Z)],
        "objective": cert.objective,
    }


def _spec_dict(spec: ProblemSpec) -> dict:
    return {
        "problem": spec.preset.value,
        "N": spec.N,
        "mu": spec.mu,
        "L": spec.L,
        "rho": spec.rho,
        "L_tilde": spec.L_tilde,
        "R": spec.R,
        "performance": spec.performance,
    }


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _add_problem_args(p):
    p.add_argument("--problem", required=True,
                   choices=["sc-grad", "gd-nomomentum", "nonconvex-grad",
                            "wc-potential"])
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--mu", type=float, default=0.1)
    p.add_argument("--L", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--R", type=float, default=None)
    p.add_argument("--kappa", type=float, default=None)


def _spec_from_args(args) -> ProblemSpec:
    R = args.R
    if R is None:
        R = 0.1 if args.problem == "wc-potential" else 1.0
    if args.kappa is not None and args.problem == "wc-potential":
        R = args.kappa * args.L / args.rho
    kw = {"R": R}
    if args.problem == "sc-grad":
        kw.update(mu=args.mu, L=args.L)
    elif args.problem in ("gd-nomomentum", "nonconvex-grad"):
        kw.update(L=args.L)
    else:
        kw.update(rho=args.rho, L=args.L)
    return make_problem(args.problem, args.N, **kw)


def _load_schedule(path: str, spec: ProblemSpec) -> StepsizeSchedule:
    with open(path) as fh:
        data = json.load(fh)
    basis = Basis(data["basis"])
    rows = tuple(tuple(map(float, r)) for r in data["values"])
    return StepsizeSchedule(int(data["N"]), basis, rows, (spec.mu, spec.L))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="bnbpep",
        description="design and certification of fixed-step first-order methods",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run the staged design pipeline")
    _add_problem_args(p)
    p.add_argument("--stages", type=int, choices=[1, 2, 3], default=3)
    p.add_argument("--gap", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bounds", choices=["sdp", "heuristic"], default="heuristic")
    p.add_argument("--Mtilde", type=float, default=1.1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--node-limit", type=int, default=200_000)
    p.add_argument("--time-limit", type=float, default=1e9)
    p.add_argument("--out", default=None)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--log-every", type=int, default=0)

    p = sub.add_parser("evaluate", help="worst case of a fixed schedule")
    _add_problem_args(p)
    p.add_argument("--stepsizes", required=True)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out", default=None)

    p = sub.add_parser("sparsify", help="minimal-support certificate of a solve report")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--sense", choices=["min", "max"], default="min")
    p.add_argument("--out", default=None)

    p = sub.add_parser("certify-potential", help="closed-form potential certificate")
    p.add_argument("--N", type=int, required=True)
    p.add_argument("--h", type=float, required=True)
    p.add_argument("--kappa", type=float, default=0.1)
    p.add_argument("--L-tilde", type=float, default=1.0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("bounds", help="variable boxes for the design QCQP")
    _add_problem_args(p)
    p.add_argument("--mode", choices=["sdp", "heuristic"], default="sdp")
    p.add_argument("--Mtilde", type=float, default=1.01)
    p.add_argument("--out", default=None)

    p = sub.add_parser("dump-model", help="text dump of the design QCQP")
    _add_problem_args(p)
    p.add_argument("--out", default=None)
    return ap


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_solve(args) -> int:
    from .bnb import run_pipeline

    spec = _spec_from_args(args)
    t0 = time.perf_counter()
    rep = run_pipeline(
        spec, stages=args.stages, bounds_mode=args.bounds, Mtilde=args.Mtilde,
        gap_rel=args.gap, seed=args.seed, node_limit=args.node_limit,
        time_limit=args.time_limit, threads=args.threads,
        log_every=args.log_every,
    )
    wall = time.perf_counter() - t0
    out = {
        "tool_version": __version__,
        "spec": _spec_dict(spec),
        "seed": args.seed,
        "stages": args.stages,
        "objective": rep.objective,
        "stage_objectives": {
            "stage1": rep.stage1_objective,
            "stage2": rep.stage2_objective,
            "stage3": rep.bnb.upper_bound if rep.bnb else None,
        },
        "schedules": _schedules_all_bases(spec, rep.schedule),
        "solver_tolerances": {"feas": 1e-9, "gap": 1e-9,
                              "bnb_gap_rel": args.gap, "bnb_gap_abs": 1e-6},
        "wall_times": dict(rep.stage_times, total=wall),
    }
    if rep.bounds is not None:
        b = rep.bounds
        out["bounds"] = {
            "provenance": b.provenance,
            "M_lambda": b.M_lambda, "M_step": b.M_step, "M_Z": b.M_Z,
            "M_P": b.M_P, "M_nu": b.M_nu, "M_tilde": b.M_tilde,
            "extras": dict(b.extras),
        }
    if rep.bnb is not None:
        r = rep.bnb
        out["bnb"] = {
            "upper_bound": r.upper_bound,
            "lower_bound": r.lower_bound,
            "gap": r.gap,
            "node_count": r.node_count,
            "cut_count": r.cut_count,
            "wall_time": r.wall_time,
            "termination": r.termination,
        }
    if spec.preset is not Preset.WC_POTENTIAL and hasattr(rep.certificate, "lambdas"):
        out["certificate"] = _certificate_dict(rep.certificate)
    if args.out:
        write_report(out, args.out, csv_tables=args.csv)
    else:
        sys.stdout.write(dumps_report(out))
    if rep.bnb is not None and rep.bnb.termination != "gap-closed":
        return EXIT_LIMIT
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    spec = _spec_from_args(args)
    if spec.preset is Preset.WC_POTENTIAL:
        sched = _load_schedule(args.stepsizes, spec)
        chain = solve_potential_chain(spec, sched.get(1, 0))
        out = {
            "tool_version": __version__,
            "spec": _spec_dict(spec),
            "value": chain.objective,
            "schedules": {"h": _schedule_dict(sched)},
        }
    else:
        from .inner import canonical_schedule

        sched = canonical_schedule(spec, _load_schedule(args.stepsizes, spec))
        wc = evaluate_worst_case(spec, sched, args.tol, args.tol)
        out = {
            "tool_version": __version__,
            "spec": _spec_dict(spec),
            "value": wc.value,
            "primal_value": wc.primal_value,
            "duality_gap": wc.duality_gap,
            "schedules": _schedules_all_bases(spec, sched),
            "certificate": _certificate_dict(wc.certificate),
        }
    if args.out:
        write_report(out, args.out)
    else:
        sys.stdout.write(dumps_report(out))
    return EXIT_OK


def _cmd_sparsify(args) -> int:
    from .sparsifier import sparse_certificate

    rep = read_report(args.infile)
    sp_dict = rep["spec"]
    spec = make_problem(sp_dict["problem"], sp_dict["N"], mu=sp_dict["mu"],
                        L=sp_dict["L"], R=sp_dict["R"])
    basis_name = {"sc-grad": "alpha", "nonconvex-grad": "hbar"}.get(
        sp_dict["problem"], "h")
    sd = rep["schedules"][basis_name]
    sched = StepsizeSchedule(sd["N"], Basis(sd["basis"]),
                             tuple(tuple(map(float, r)) for r in sd["values"]),
                             (spec.mu, spec.L))
    p_star = rep["objective"]
    cert, pattern = sparse_certificate(spec, sched, p_star, sense=args.sense)
    out = {
        "tool_version": __version__,
        "spec": _spec_dict(spec),
        "p_star": p_star,
        "sense": args.sense,
        "l1_norm": sum(cert.lambdas.values()),
        "lambda_support": sorted(
            f"{i},{j}" for (i, j) in pattern.lambda_support),
        "z_rank": pattern.z_rank,
        "nonzero_P_columns": sorted(pattern.nonzero_P_columns),
        "certificate": _certificate_dict(cert),
    }
    if args.out:
        write_report(out, args.out)
    else:
        sys.stdout.write(dumps_report(out))
    return EXIT_OK


def _cmd_certify_potential(args) -> int:
    cert = potential_certificate(args.h, args.N, kappa=args.kappa,
                                 L_tilde=args.L_tilde)
    ok, resid, eig = cert.validate()
    out = {
        "tool_version": __version__,
        "N": args.N,
        "h": args.h,
        "kappa": args.kappa,
        "L_tilde": args.L_tilde,
        "objective": cert.objective,
        "valid": bool(ok),
        "max_residual": resid,
        "min_eigenvalue": eig,
        "b": list(map(float, cert.b)),
        "c": list(map(float, cert.c)),
    }
    if args.out:
        write_report(out, args.out)
    else:
        sys.stdout.write(dumps_report(out))
    return EXIT_OK if ok else EXIT_SOLVER


def _cmd_bounds(args) -> int:
    from .bnb import run_pipeline

    spec = _spec_from_args(args)
    if args.mode == "sdp":
        rep = run_pipeline(spec, stages=1)
        nu_init = (rep.stage1_objective / spec.R ** 2
                   if spec.preset is not Preset.WC_POTENTIAL
                   else rep.stage1_objective)
        b = compute_variable_bounds(spec, "sdp", {"nu_init": nu_init})
    else:
        rep = run_pipeline(spec, stages=2)
        stage_inputs = {
            "objective": rep.stage2_objective, "Mtilde": args.Mtilde,
            "schedule": rep.stage2_schedule,
            "steps": rep.stage2_schedule.as_vector()
            if spec.preset is not Preset.WC_POTENTIAL
            else np.array([rep.stage2_schedule.get(1, 0)]),
        }
        if spec.preset is Preset.WC_POTENTIAL:
            stage_inputs["h"] = rep.stage2_schedule.get(1, 0)
        b = compute_variable_bounds(spec, "heuristic", stage_inputs)
    out = {
        "tool_version": __version__,
        "spec": _spec_dict(spec),
        "mode": args.mode,
        "M_lambda": b.M_lambda, "M_step": b.M_step, "M_Z": b.M_Z,
        "M_P": b.M_P, "M_nu": b.M_nu, "M_tilde": b.M_tilde,
        "extras": dict(b.extras),
    }
    if args.out:
        write_report(out, args.out)
    else:
        sys.stdout.write(dumps_report(out))
    return EXIT_OK


def _cmd_dump_model(args) -> int:
    spec = _spec_from_args(args)
    model = build_bnbpep_qcqp(spec)
    nv, nc = standard_form_counts(model)
    lines = [f"# {spec.preset.value} N={spec.N}: {nv} variables, {nc} constraints"]
    lines.append("# variables: name kind lb ub")
    for v in model.variables:
        lines.append(f"var {v.name} {v.kind} {v.lb:.17g} {v.ub:.17g}")
    lines.append("# linear rows: tag sense rhs then coefficient pairs")
    for con in model.lin_cons:
        terms = " ".join(f"{model.variables[i].name}:{c:.17g}"
                         for i, c in sorted(con.terms.items()))
        lines.append(f"lin {con.tag} {con.sense} {con.rhs:.17g} {terms}")
    lines.append("# quadratic rows: tag sense rhs, quadratic triples, linear pairs")
    for con in model.quad_cons:
        quad = " ".join(
            f"{model.variables[i].name}*{model.variables[j].name}:{c:.17g}"
            for (i, j), c in sorted(con.quad.items()))
        lin = " ".join(f"{model.variables[i].name}:{c:.17g}"
                       for i, c in sorted(con.lin.items()))
        lines.append(f"quad {con.tag} {con.sense} {con.rhs:.17g} {quad} | {lin}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_BAD_ARGS if exc.code not in (0,) else 0
    try:
        if args.command == "solve":
            return _cmd_solve(args)
        if args.command == "evaluate":
            return _cmd_evaluate(args)
        if args.command == "sparsify":
            return _cmd_sparsify(args)
        if args.command == "certify-potential":
            return _cmd_certify_potential(args)
        if args.command == "bounds":
            return _cmd_bounds(args)
        if args.command == "dump-model":
            return _cmd_dump_model(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS
    except (RuntimeError, OSError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_BAD_ARGS


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
