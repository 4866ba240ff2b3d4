"""Command-line front end: ingest a run bundle, plan, validate, report."""
import argparse
import csv
import hashlib
import json
import os
import sys
from types import SimpleNamespace

import numpy as np

from .acpf import ACPFError, evaluate_residuals
from .benders import BendersError, run_gbd
from .caseio import CaseError, read_case, read_matrix_case, write_case
from .config import ConfigError, load_config
from .conic import ConicProgramError, compile_program
from .ingest import (IngestError, TimeSeriesData, baseline_states,
                     generate_boundary_conditions, load_timeseries,
                     reconstruct_reactive, to_days)
from .milp import MasterError
from .network import NetworkError, find_cycle_basis
from .opf import (ModelError, build_centralized, build_dc_centralized,
                  point_from_record)
from .report import (ReportError, emit_reports, model_size,
                     representative_days)

_ERRORS = (ConfigError, CaseError, IngestError, NetworkError, ModelError,
           ConicProgramError, MasterError, BendersError, ACPFError,
           ReportError)

_BUNDLE_FILES = ("network.case", "load_p.csv", "load_q.csv")


# -- bundle plumbing ----------------------------------------------------------


def _read_network(path):
    """Case in either format; matrix cases also yield load snapshots."""
    if path.endswith(".m"):
        return read_matrix_case(path)
    return read_case(path), None, None


def _write_series(path, ids, matrix):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ids)
        for row in np.atleast_2d(matrix):
            writer.writerow([repr(float(x)) for x in row])


def _bundle_dir(cfg):
    return os.path.join(cfg.out, "bundle")


def _bundle_hash(bundle, names):
    digest = hashlib.sha256()
    for name in names:
        with open(os.path.join(bundle, name), "rb") as fh:
            digest.update(fh.read())
    return digest.hexdigest()


def _write_bundle(cfg, network, ts, sources):
    bundle = _bundle_dir(cfg)
    os.makedirs(bundle, exist_ok=True)
    write_case(network, os.path.join(bundle, "network.case"))
    bus_ids = [b.id for b in network.buses]
    _write_series(os.path.join(bundle, "load_p.csv"), bus_ids, ts.load_p)
    _write_series(os.path.join(bundle, "load_q.csv"), bus_ids, ts.load_q)
    files = list(_BUNDLE_FILES)
    # the slack machine's output is an outcome, not an input; only the
    # other machines' series belong in the bundle
    fixed = [g for g in range(network.n_gen) if g != network.slack_gen]
    if fixed:
        _write_series(os.path.join(bundle, "gen_p.csv"),
                      [network.generators[g].id for g in fixed],
                      ts.fixed_gen_p[:, fixed])
        files.append("gen_p.csv")
    manifest = {
        "files": files,
        "sha256": _bundle_hash(bundle, files),
        "day_hours": ts.day_hours,
        "n_days": ts.n_days,
        "n_bus": network.n_bus,
        "n_branch": network.n_branch,
        "n_gen": network.n_gen,
        "n_site": network.n_site,
        "sources": sources,
    }
    with open(os.path.join(bundle, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return bundle, manifest


def _read_bundle(cfg):
    bundle = _bundle_dir(cfg)
    manifest_path = os.path.join(bundle, "manifest.json")
    if not os.path.exists(manifest_path):
        raise IngestError("no bundle at %s; run ingest first" % bundle)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if _bundle_hash(bundle, manifest["files"]) != manifest["sha256"]:
        raise IngestError("bundle at %s does not match its manifest hash"
                          % bundle)
    network = read_case(os.path.join(bundle, "network.case"))
    gen_path = os.path.join(bundle, "gen_p.csv")
    ts = load_timeseries(os.path.join(bundle, "load_p.csv"), network,
                         day_hours=manifest["day_hours"],
                         gen_path=gen_path if "gen_p.csv" in
                         manifest["files"] else None)
    qs = load_timeseries(os.path.join(bundle, "load_q.csv"), network,
                         day_hours=manifest["day_hours"])
    ts = TimeSeriesData(load_p=ts.load_p, load_q=qs.load_p,
                        fixed_gen_p=ts.fixed_gen_p,
                        day_hours=manifest["day_hours"])
    return network, ts, manifest


# -- subcommands --------------------------------------------------------------


def cmd_ingest(cfg):
    if not cfg.case or not cfg.series:
        raise ConfigError("ingest needs [paths] case and series")
    network, p_snap, q_snap = _read_network(cfg.case)
    ts = load_timeseries(cfg.series, network, day_hours=cfg.day_hours,
                         gen_path=cfg.gen_series or None)
    if cfg.series_q:
        qs = load_timeseries(cfg.series_q, network, day_hours=cfg.day_hours)
        ts = TimeSeriesData(load_p=ts.load_p, load_q=qs.load_p,
                            fixed_gen_p=ts.fixed_gen_p,
                            day_hours=cfg.day_hours)
    elif p_snap is not None:
        ts = reconstruct_reactive(ts, network, p_snap, q_snap)
    # else: no reactive information anywhere; unity power factor stands.

    spec = cfg.boundary_spec()
    if spec is not None:
        network = generate_boundary_conditions(network, ts, spec)
    else:
        baseline_states(network, ts)        # the horizon must solve as-is

    sources = {"case": cfg.case, "series": cfg.series,
               "series_q": cfg.series_q or None,
               "gen_series": cfg.gen_series or None}
    bundle, manifest = _write_bundle(cfg, network, ts, sources)
    print("bundle: %s" % bundle)
    print("sha256: %s" % manifest["sha256"])
    print("network: %d buses, %d branches, %d machines, %d candidate sites"
          % (network.n_bus, network.n_branch, network.n_gen, network.n_site))
    print("horizon: %d days x %d hours" % (ts.n_days, ts.day_hours))
    return 0


def _write_plan_csv(path, network, result):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("site", "bus", "u", "w", "c"))
        for s, site in enumerate(network.candidate_sites):
            writer.writerow((site.id, site.bus, int(round(result.u[s])),
                             repr(float(result.w[s])),
                             repr(float(result.c[s]))))


def _relaxed_residuals(network, days, result):
    cycles = find_cycle_basis(network)
    out = {}
    for d in sorted(result.day_values):
        rec = SimpleNamespace(status="optimal", values=result.day_values[d],
                              objective=result.opex[d])
        out[d] = evaluate_residuals(network, point_from_record(network, rec),
                                    cycles)
    return out


def _instance_sizes(network, n_days, day_hours, iterations=0):
    return model_size(G=network.n_gen - 1, N=network.n_bus,
                      L=network.n_branch, S=network.n_site,
                      T=n_days * day_hours, D=n_days, P=day_hours,
                      iterations=iterations)


def _summarize(cfg, result, refine_expected):
    refinement_ok = True
    if refine_expected:
        refinement_ok = (result.refinement is not None and
                         all(r.converged for r in
                             result.refinement.values()))
    return {
        "converged": result.converged,
        "iterations": result.iterations,
        "lb": result.lb,
        "ub": result.ub,
        "gap": result.gap,
        "capex": result.capex,
        "opex_total": (float(np.sum(result.opex))
                       if result.converged else None),
        "u": [int(round(x)) for x in result.u],
        "w": [float(x) for x in result.w],
        "c": [float(x) for x in result.c],
        "refinement_converged": refinement_ok if refine_expected else None,
        "workers": cfg.workers,
        "seed": cfg.seed,
    }, refinement_ok


def cmd_plan(cfg):
    network, ts, manifest = _read_bundle(cfg)
    days = to_days(ts, network)
    options = cfg.gbd_options(trace_path=os.path.join(cfg.out, "trace.jsonl"))
    result = run_gbd(network, days, cfg.weights(), options)

    residuals = None
    if options.subproblem == "socp" and result.converged:
        residuals = _relaxed_residuals(network, days, result)
    sizes = _instance_sizes(network, ts.n_days, ts.day_hours,
                            result.iterations)
    emit_reports(result.state, residuals, sizes, cfg.out, n_days=ts.n_days)
    _write_plan_csv(os.path.join(cfg.out, "plan.csv"), network, result)

    refine_expected = options.refine and options.subproblem == "socp"
    summary, refinement_ok = _summarize(cfg, result, refine_expected)
    with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if not result.converged:
        print("did not converge in %d iterations (lb %.6g); trace kept at %s"
              % (result.iterations, result.lb, options.trace_path))
        return 1
    print("converged in %d iterations: lb %.6g, ub %.6g, gap %.3g"
          % (result.iterations, result.lb, result.ub, result.gap))
    for s, site in enumerate(network.candidate_sites):
        if round(result.u[s]):
            print("site %s @ bus %s: w = %.6g, c = %.6g"
                  % (site.id, site.bus, result.w[s], result.c[s]))
    if not any(round(x) for x in result.u):
        print("no storage built")
    if refine_expected and not refinement_ok:
        failed = sorted(d for d, r in (result.refinement or {}).items()
                        if not r.converged)
        print("refinement failed on days %s" % failed)
        return 1
    return 0


def _solve_centralized(cfg, network, days):
    weights = cfg.weights()
    if cfg.validation_mode == "dc-lp":
        prog = build_dc_centralized(network, days, weights)
    else:
        prog = build_centralized(network, days, weights,
                                 relax_integrality=True)
    return compile_program(prog).solve(options=cfg.solver_options())


def _state_differences(network, result, central, n_days):
    """Per-day, per-block max |decomposed - centralized| over shared names."""
    rows = []
    for d in range(n_days):
        values = result.day_values.get(d)
        if values is None:
            continue
        for name in sorted(values):
            other = central.values.get("%s_d%d" % (name, d))
            if other is None:
                continue
            diff = np.max(np.abs(np.asarray(values[name]) -
                                 np.asarray(other)))
            rows.append((d, name, float(diff)))
    return rows


def cmd_validate(cfg):
    if cfg.validation_mode == "none":
        raise ConfigError("validate needs validation_mode "
                          "relax-integrality-socp or dc-lp")
    network, ts, manifest = _read_bundle(cfg)
    days = to_days(ts, network)
    options = cfg.gbd_options(trace_path=os.path.join(cfg.out, "trace.jsonl"))
    result = run_gbd(network, days, cfg.weights(), options)

    sizes = _instance_sizes(network, ts.n_days, ts.day_hours,
                            result.iterations)
    emit_reports(result.state, None, sizes, cfg.out, n_days=ts.n_days)
    _write_plan_csv(os.path.join(cfg.out, "plan.csv"), network, result)

    central = None
    central_error = None
    try:
        rec = _solve_centralized(cfg, network, days)
        if rec.status != "optimal":
            central_error = "centralized solve ended %s" % rec.status
        else:
            central = rec
    except _ERRORS as exc:
        central_error = "centralized solve failed: %s" % exc

    report = {"decomposed_converged": result.converged,
              "iterations": result.iterations,
              "decomposed_objective": result.ub,
              "centralized_objective": None,
              "objective_difference": None,
              "max_linking_residual": None,
              "centralized_error": central_error}
    if central is not None:
        w_cen = np.asarray(central.values["w"], dtype=float)
        c_cen = np.asarray(central.values["c"], dtype=float)
        link = max(np.max(np.abs(result.w - w_cen), initial=0.0),
                   np.max(np.abs(result.c - c_cen), initial=0.0))
        report["centralized_objective"] = central.objective
        if result.ub is not None:
            report["objective_difference"] = result.ub - central.objective
        report["max_linking_residual"] = float(link)
        with open(os.path.join(cfg.out, "linking.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("site", "bus", "w_decomposed", "c_decomposed",
                             "w_centralized", "c_centralized"))
            for s, site in enumerate(network.candidate_sites):
                writer.writerow((site.id, site.bus,
                                 repr(float(result.w[s])),
                                 repr(float(result.c[s])),
                                 repr(float(w_cen[s])),
                                 repr(float(c_cen[s]))))
        with open(os.path.join(cfg.out, "state_differences.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("day", "variable", "max_abs_difference"))
            for row in _state_differences(network, result, central,
                                          ts.n_days):
                writer.writerow((row[0], row[1], repr(row[2])))

    with open(os.path.join(cfg.out, "validation.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if central_error:
        print(central_error)
    if central is not None:
        print("decomposed %.6g vs centralized %.6g "
              "(max linking residual %.3g)"
              % (result.ub if result.ub is not None else float("nan"),
                 central.objective, report["max_linking_residual"]))
    if not result.converged:
        print("decomposed run did not converge in %d iterations"
              % result.iterations)
    return 0 if (result.converged and central is not None) else 1


def cmd_report(cfg):
    """Instance summary without solving: size table, representative days."""
    network, ts, manifest = _read_bundle(cfg)
    sizes = _instance_sizes(network, ts.n_days, ts.day_hours)
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "instance_sizes.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("mode", "binary_vars", "continuous_vars",
                         "constraints", "parameters"))
        for mode in ("centralized", "master", "subproblem"):
            r = sizes[mode]
            writer.writerow((mode, r.binary_vars, r.continuous_vars,
                             r.constraints, r.parameters))
    for mode in ("centralized", "master", "subproblem"):
        r = sizes[mode]
        print("%-11s %8d binaries %10d continuous %10d constraints"
              % (mode, r.binary_vars, r.continuous_vars, r.constraints))
    try:
        picked = representative_days(ts, network=network)
    except ReportError as exc:
        print("representative days unavailable: %s" % exc)
    else:
        print("representative days: %s" % ", ".join(str(d) for d in picked))
        with open(os.path.join(cfg.out, "representative_days.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("day",))
            for d in picked:
                writer.writerow((d,))
    return 0


# -- argument handling --------------------------------------------------------


_COMMANDS = {"ingest": cmd_ingest, "plan": cmd_plan,
             "validate": cmd_validate, "report": cmd_report}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bessplan",
        description="Site and size grid storage by decomposed planning.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "validate inputs and write a canonical run bundle",
        "plan": "run the planner on an ingested bundle and emit artifacts",
        "validate": "compare the decomposed plan against the one-shot model",
        "report": "summarize an ingested bundle without solving",
    }
    for name, func in _COMMANDS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, metavar="PATH",
                       help="run configuration file")
        p.add_argument("--workers", type=int, metavar="N",
                       help="subproblem worker processes")
        p.add_argument("--seed", type=int, metavar="K",
                       help="seed for all randomized pieces")
        p.add_argument("--out", metavar="DIR",
                       help="artifact directory")
        p.set_defaults(func=func)
    return parser


def _overrides(args):
    over = {}
    env = os.environ.get("BESSPLAN_WORKERS")
    if env is not None:
        try:
            over["workers"] = int(env)
        except ValueError:
            raise ConfigError("BESSPLAN_WORKERS must be an integer, got %r"
                              % env)
    if args.workers is not None:
        over["workers"] = args.workers
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out"] = args.out
    return over


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides=_overrides(args))
        return args.func(cfg)
    except _ERRORS + (OSError,) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
