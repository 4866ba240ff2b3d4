"""Decomposed planning loop: siting master, daily dispatch stage, cut store.

One iteration = master solve, a parallel sweep over the day subproblems at
the proposed rating, then a single synchronization point where the
orchestrator folds the returned sensitivities into new cuts and checks the
bounds. Workers never touch the cut store.
"""
import json
import multiprocessing
import time
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .acpf import recover_feasible
from .conic import compile_program
from .milp import MasterProblem
from .opf import (ModelError, build_dc_subproblem,
                  build_feasibility_subproblem, build_subproblem,
                  extract_feasibility_cut, extract_optimality_cut,
                  injections_with_storage, point_from_record)


class BendersError(RuntimeError):
    pass


@dataclass
class GBDOptions:
    epsilon: float = 5e-3        # relative gap threshold
    delta: float = None          # absolute threshold; replaces epsilon when set
    max_iterations: int = 500
    workers: int = 1
    alpha_floor: float = 0.0
    relax_integrality: bool = False
    subproblem: str = "socp"     # "socp" or "dc"
    refine: bool = True
    trace_path: str = None
    solver_options: object = None  # conic tolerance overrides for the days


@dataclass
class IterationRecord:
    iteration: int
    lb: float
    ub: float                    # None while any day is infeasible
    gap: float
    n_feasible: int
    master_seconds: float
    sub_max_seconds: float
    sub_total_seconds: float

    def as_json(self):
        return json.dumps({
            "iteration": self.iteration, "lb": self.lb, "ub": self.ub,
            "gap": self.gap, "n_feasible": self.n_feasible,
            "master_seconds": self.master_seconds,
            "sub_max_seconds": self.sub_max_seconds,
            "sub_total_seconds": self.sub_total_seconds,
        })


@dataclass
class BendersState:
    cuts: list = field(default_factory=list)
    phi: set = field(default_factory=set)
    lb_history: list = field(default_factory=list)
    ub_history: list = field(default_factory=list)
    records: list = field(default_factory=list)
    anchors: list = field(default_factory=list)


@dataclass
class PlanResult:
    converged: bool
    iterations: int
    u: np.ndarray
    w: np.ndarray
    c: np.ndarray
    capex: float
    lb: float
    ub: float
    gap: float
    opex: np.ndarray
    day_values: dict
    state: BendersState
    refinement: dict = None

    @property
    def total_cost(self):
        return self.ub


# -- subproblem workers ------------------------------------------------------
#
# Each worker keeps its own compiled-program cache keyed by day content, so
# repeated day profiles compile once and iterations only pay the parameter
# update. The pool is forked before the first solve; nothing solver-side is
# shared between processes.

_POOL_CTX = {}


def _make_ctx(network, days, weights, mode, solver_options=None):
    return {"network": network, "days": days, "weights": weights,
            "mode": mode, "solver": solver_options, "cache": {}}


def _pool_init(network, days, weights, mode, solver_options=None):
    _POOL_CTX.update(_make_ctx(network, days, weights, mode, solver_options))


def _day_program(ctx, d, kind):
    day = ctx["days"][d]
    key = (kind, day.key())
    if key not in ctx["cache"]:
        net, w = ctx["network"], ctx["weights"]
        if ctx["mode"] == "socp":
            build = build_subproblem if kind == "sbp" else build_feasibility_subproblem
            prog = build(net, day, w)
        else:
            prog = build_dc_subproblem(net, day, w, slacked_links=kind != "sbp")
        ctx["cache"][key] = compile_program(prog)
    return ctx["cache"][key]


def _solve_day(ctx, task):
    d, w_hat, c_hat = task
    params = {"w_hat": w_hat, "c_hat": c_hat}
    t0 = time.perf_counter()
    rec = _day_program(ctx, d, "sbp").solve(parameter_values=params,
                                            options=ctx["solver"])
    if rec.status == "optimal":
        return {"day": d, "kind": "optimality", "status": rec.status,
                "objective": rec.objective, "duals": rec.duals,
                "values": rec.values, "seconds": time.perf_counter() - t0}
    if rec.status.startswith("infeasible"):
        fc = _day_program(ctx, d, "fc").solve(parameter_values=params,
                                              options=ctx["solver"])
        return {"day": d, "kind": "feasibility", "status": fc.status,
                "objective": fc.objective, "duals": fc.duals,
                "values": None, "seconds": time.perf_counter() - t0}
    return {"day": d, "kind": "error", "status": rec.status, "objective": None,
            "duals": None, "values": None, "seconds": time.perf_counter() - t0}


def _pool_solve(task):
    return _solve_day(_POOL_CTX, task)


# -- orchestration ----------------------------------------------------------


def _check_anchor(state, anchor):
    for seen in state.anchors:
        if np.max(np.abs(seen - anchor)) <= 1e-9:
            raise BendersError(
                "master repeated an anchor at iteration %d; the cut store "
                "is not separating" % (len(state.anchors) + 1))
    state.anchors.append(anchor)


def _fold_results(master, state, results, iteration, w_hat, c_hat):
    """Barrier step: turn the day sweep into cuts; returns (opex, feasible)."""
    opex = np.full(len(results), np.nan)
    feasible = np.zeros(len(results), dtype=bool)
    for out in results:
        d = out["day"]
        if out["kind"] == "error" or out["status"] != "optimal":
            raise BendersError(
                "day %d iteration %d: subproblem returned status %r"
                % (d, iteration, out["status"]))
        rec = SimpleNamespace(status=out["status"], objective=out["objective"],
                              duals=out["duals"])
        if out["kind"] == "optimality":
            cut = extract_optimality_cut(d, iteration, rec, w_hat, c_hat)
            state.phi.add((d, iteration))
            opex[d] = out["objective"]
            feasible[d] = True
        else:
            try:
                cut = extract_feasibility_cut(d, iteration, rec, w_hat, c_hat)
            except ModelError as exc:
                raise BendersError(
                    "day %d iteration %d: infeasible dispatch but zero "
                    "relief measure (%s)" % (d, iteration, exc))
        master.add_cut(cut)
        state.cuts.append(cut)
    return opex, feasible


def run_gbd(network, days, weights, options=None):
    """Plan storage over the given days; returns the decision and the trace.

    Terminates when every day dispatches feasibly and the bound gap closes
    under the configured threshold, then (for the cone mode) re-solves the
    exact power flow hour by hour from the relaxed operating points.
    """
    options = options or GBDOptions()
    D = len(days)
    if D == 0:
        raise BendersError("no days to plan over")
    if options.subproblem not in ("socp", "dc"):
        raise BendersError("unknown subproblem mode %r" % options.subproblem)

    master = MasterProblem(network, D, weights,
                           alpha_floor=options.alpha_floor)
    state = BendersState()
    serial_ctx = _make_ctx(network, days, weights, options.subproblem,
                           options.solver_options)
    pool = None
    if options.workers > 1:
        ctx = multiprocessing.get_context("fork")
        pool = ctx.Pool(options.workers, initializer=_pool_init,
                        initargs=(network, days, weights, options.subproblem,
                                  options.solver_options))
    trace = open(options.trace_path, "w") if options.trace_path else None

    day_values = {}
    converged = False
    sol = None
    ub = gap = None
    opex = np.full(D, np.nan)
    try:
        for k in range(1, options.max_iterations + 1):
            t0 = time.perf_counter()
            sol = master.solve(relax_integrality=options.relax_integrality)
            master_seconds = time.perf_counter() - t0
            lb = sol.lb
            if state.lb_history and lb < state.lb_history[-1] - max(
                    1e-6 * abs(state.lb_history[-1]), 1e-7):
                raise BendersError(
                    "lower bound regressed at iteration %d: %.6e -> %.6e"
                    % (k, state.lb_history[-1], lb))
            state.lb_history.append(lb)
            _check_anchor(state, np.concatenate([sol.u, sol.w, sol.c,
                                                 sol.alpha]))

            tasks = [(d, sol.w, sol.c) for d in range(D)]
            if pool is not None:
                results = pool.map(_pool_solve, tasks)
            else:
                results = [_solve_day(serial_ctx, t) for t in tasks]
            sub_seconds = [r["seconds"] for r in results]

            day_opex, feasible = _fold_results(master, state, results, k,
                                               sol.w, sol.c)
            for out in results:
                if out["values"] is not None:
                    day_values[out["day"]] = out["values"]

            ub = gap = None
            if feasible.all():
                opex = day_opex
                ub = weights.capex_scale * sol.capex + float(opex.sum())
                if options.delta is not None:
                    gap = ub - lb
                    converged = gap < options.delta
                else:
                    gap = abs(ub - lb) / max(abs(lb), 1e-12)
                    converged = gap < options.epsilon
            state.ub_history.append(ub)
            rec = IterationRecord(
                iteration=k, lb=lb, ub=ub, gap=gap,
                n_feasible=int(feasible.sum()),
                master_seconds=master_seconds,
                sub_max_seconds=max(sub_seconds),
                sub_total_seconds=sum(sub_seconds))
            state.records.append(rec)
            if trace:
                trace.write(rec.as_json() + "\n")
                trace.flush()
            if converged:
                break
    finally:
        if pool is not None:
            pool.close()
            pool.join()
        if trace:
            trace.close()

    result = PlanResult(
        converged=converged, iterations=len(state.records),
        u=sol.u, w=sol.w, c=sol.c, capex=sol.capex,
        lb=state.lb_history[-1], ub=ub, gap=gap, opex=opex,
        day_values=day_values, state=state)
    if converged and options.refine and options.subproblem == "socp":
        result.refinement = refine_days(network, days, result)
    return result


def refine_days(network, days, result):
    """Exact power-flow recovery for every day at the final rating."""
    out = {}
    for d, day in enumerate(days):
        values = result.day_values.get(d)
        if values is None:
            raise BendersError("day %d has no stored operating point" % d)
        rec = SimpleNamespace(status="optimal", objective=result.opex[d],
                              values=values, duals={})
        pt = point_from_record(network, rec)
        p_inj, q_fix = injections_with_storage(network, day, pt)
        out[d] = recover_feasible(network, pt, p_inj, q_fix)
    return out
