"""Run reporting: model-size accounting, representative-day selection,
trace tables, scalability sweeps, and static plots.
"""
import csv
import dataclasses
import os
import time
import warnings
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .benders import GBDOptions, run_gbd
from .opf import DayData


class ReportError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model-size accounting

@dataclass
class SizeReport:
    mode: str                 # centralized | master | subproblem
    binary_vars: int
    continuous_vars: int
    constraints: int
    parameters: int
    inputs: dict


def model_size(G, N, L, S, T, D, P, iterations=0):
    """Closed-form problem sizes for all three program families.

    The subproblem row counts one day (P hours); the master grows one
    constraint per accumulated cut batch, so `iterations` sets its cut rows.
    """
    counts = dict(G=G, N=N, L=L, S=S, T=T, D=D, P=P, iterations=iterations)
    for name, v in counts.items():
        if v != int(v) or v < 0:
            raise ReportError("%s must be a nonnegative integer, got %r"
                              % (name, v))
    if T != D * P:
        raise ReportError("inconsistent horizon: T = %d but D * P = %d"
                          % (T, D * P))

    grid_vars = 2 + G + 4 * N + 6 * L      # per-hour dispatch variables
    grid_cons = 7 + 2 * G + 8 * N + 10 * L

    subproblem = SizeReport(
        "subproblem", 0,
        grid_vars * P + (2 * P + (P + 1) + 2) * S,
        grid_cons * P + (2 * P + 2 * (P + 1) + 5) * S,
        2 * S, counts)
    master = SizeReport(
        "master", S,
        2 * S + D,
        5 * S + D * (iterations + 1),
        0, counts)
    centralized = SizeReport(
        "centralized", S,
        grid_vars * T + (2 * T + (T + 1) + 2) * S,
        grid_cons * T + (2 * T + 2 * (T + 1) + 6 + 2 * D) * S,
        0, counts)
    return {r.mode: r for r in (centralized, master, subproblem)}


# ---------------------------------------------------------------------------
# representative days

_SEASONS = (("DJF", (12, 1, 2)), ("MAM", (3, 4, 5)),
            ("JJA", (6, 7, 8)), ("SON", (9, 10, 11)))


def representative_days(ts, k_per_season=1, network=None, start=None,
                        day_months=None):
    """Pick the per-season days closest (RMSE) to the seasonal median shape.

    The shape is the daily profile of the heaviest-loaded bus that hosts no
    machine (falling back to all buses when no network is given). Days are
    dated from `start` (default Jan 1 of a non-leap year) unless day_months
    assigns each day a calendar month directly; seasons with no days are
    skipped with a warning.
    """
    if k_per_season < 1:
        raise ReportError("k_per_season must be at least 1")
    start = start or date(2023, 1, 1)
    if day_months is not None:
        day_months = list(day_months)
        if len(day_months) != ts.n_days:
            raise ReportError("day_months must label all %d days" % ts.n_days)
        if any(m not in range(1, 13) for m in day_months):
            raise ReportError("months must lie in 1..12")
    P = ts.day_hours

    columns = range(ts.load_p.shape[1])
    if network is not None:
        gen_buses = set(network.gen_bus_idx.tolist())
        columns = [n for n in range(network.n_bus) if n not in gen_buses]
        if not columns:
            raise ReportError("every bus hosts a machine; no load shape "
                              "to compare")
    totals = ts.load_p.sum(axis=0)
    bus = min(columns, key=lambda n: (-totals[n], n))

    by_season = {name: [] for name, _ in _SEASONS}
    month_of = {m: name for name, months in _SEASONS for m in months}
    for d in range(ts.n_days):
        month = day_months[d] if day_months is not None \
            else (start + timedelta(days=d)).month
        by_season[month_of[month]].append(d)

    chosen = []
    for name, _ in _SEASONS:
        days = by_season[name]
        if not days:
            warnings.warn("season %s has no days; skipped" % name)
            continue
        profiles = np.stack([ts.load_p[d * P:(d + 1) * P, bus] for d in days])
        median = np.median(profiles, axis=0)
        rmse = np.sqrt(np.mean((profiles - median) ** 2, axis=1))
        order = sorted(range(len(days)), key=lambda i: (rmse[i], days[i]))
        chosen.extend(sorted(days[i] for i in order[:k_per_season]))
    return chosen


# ---------------------------------------------------------------------------
# tables and plots

_CONVERGENCE_COLUMNS = ("iteration", "lb", "ub", "gap", "n_feasible",
                        "master_seconds", "sub_max_seconds",
                        "sub_total_seconds")
_RESIDUAL_COLUMNS = ("day", "max_nodal_p", "max_nodal_q", "max_branch_angle",
                     "max_cycle", "max_cone_gap")
_SIZE_COLUMNS = ("mode", "binary_vars", "continuous_vars", "constraints",
                 "parameters", "G", "N", "L", "S", "T", "D", "P",
                 "iterations")
_TIMING_COLUMNS = ("n_subproblems", "iterations", "master_seconds",
                   "sbp_seconds_total", "sbp_seconds_max", "wall_seconds")


def _cell(value):
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def _abs_max(a):
    a = np.asarray(a)
    return float(np.max(np.abs(a))) if a.size else 0.0


def timing_row(state, n_subproblems):
    # wall defaults to the serial-equivalent total; sweep rows overwrite it
    # with the measured clock
    recs = state.records
    master = sum(r.master_seconds for r in recs)
    sbp = sum(r.sub_total_seconds for r in recs)
    return (n_subproblems, len(recs), master, sbp,
            max((r.sub_max_seconds for r in recs), default=0.0),
            master + sbp)


def emit_reports(state, residuals, sizes, out_dir, n_days=None):
    """Write the run's tables (and plots when there is data to draw).

    state: the planner's iteration trace; residuals: {day: residual report}
    from the recovery stage; sizes: SizeReport collection. Returns the list
    of written paths. CSVs are headers-only when a section has no data.
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise ReportError("cannot write to %s: %s" % (out_dir, exc))

    records = state.records if state is not None else []
    written = []

    rows = [tuple(getattr(r, c) for c in _CONVERGENCE_COLUMNS)
            for r in records]
    written.append(_write_csv(os.path.join(out_dir, "convergence.csv"),
                              _CONVERGENCE_COLUMNS, rows))

    gap_rows = [(r.iteration, r.gap) for r in records if r.gap is not None]
    written.append(_write_csv(os.path.join(out_dir, "gaps.csv"),
                              ("iteration", "gap"), gap_rows))

    res_rows = []
    for d in sorted(residuals or {}):
        rep = residuals[d]
        res_rows.append((d, _abs_max(rep.nodal_p), _abs_max(rep.nodal_q),
                         _abs_max(rep.branch_angle), _abs_max(rep.cycle_sums),
                         _abs_max(rep.cone_gap)))
    written.append(_write_csv(os.path.join(out_dir, "residuals.csv"),
                              _RESIDUAL_COLUMNS, res_rows))

    size_list = list((sizes or {}).values()) if isinstance(sizes, dict) \
        else list(sizes or [])
    size_rows = [(s.mode, s.binary_vars, s.continuous_vars, s.constraints,
                  s.parameters) + tuple(s.inputs[k] for k in _SIZE_COLUMNS[5:])
                 for s in size_list]
    written.append(_write_csv(os.path.join(out_dir, "sizes.csv"),
                              _SIZE_COLUMNS, size_rows))

    timing_rows = []
    if records:
        if n_days is None:
            n_days = max(r.n_feasible for r in records)
        timing_rows.append(timing_row(state, n_days))
    written.append(_write_csv(os.path.join(out_dir, "timing.csv"),
                              _TIMING_COLUMNS, timing_rows))

    if records:
        written.append(_plot_convergence(records, out_dir))
    if res_rows:
        written.append(_plot_residuals(res_rows, out_dir))
    return written


def _plot_convergence(records, out_dir):
    fig, (ax_bounds, ax_time) = plt.subplots(2, 1, figsize=(7, 7),
                                             sharex=True)
    it = [r.iteration for r in records]
    ax_bounds.plot(it, [r.lb for r in records], marker="o", label="lower bound")
    ub = [(r.iteration, r.ub) for r in records if r.ub is not None]
    if ub:
        ax_bounds.plot(*zip(*ub), marker="s", label="upper bound")
    ax_bounds.set_ylabel("objective")
    ax_bounds.legend()
    ax_time.bar(it, [r.master_seconds for r in records], width=0.35,
                label="master")
    ax_time.bar([i + 0.35 for i in it],
                [r.sub_max_seconds for r in records], width=0.35,
                label="slowest day")
    ax_time.set_xlabel("iteration")
    ax_time.set_ylabel("seconds")
    ax_time.legend()
    path = os.path.join(out_dir, "convergence.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _plot_residuals(res_rows, out_dir):
    fig, ax = plt.subplots(figsize=(7, 4))
    days = [row[0] for row in res_rows]
    width = 0.4
    ax.bar([d - width / 2 for d in days], [row[1] for row in res_rows],
           width=width, label="nodal P")
    ax.bar([d + width / 2 for d in days], [row[5] for row in res_rows],
           width=width, label="cone gap")
    ax.set_yscale("log")
    ax.set_xlabel("day")
    ax.set_ylabel("max residual")
    ax.legend()
    path = os.path.join(out_dir, "residuals.png")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# scalability sweep

def scalability_sweep(network, day, weights, counts=(1, 3, 9, 27, 81),
                      options=None):
    """Re-plan the same day profile cloned to geometrically growing horizons.

    Returns one timing row per horizon size (the shape of the usual
    solution-time-versus-subproblem-count table).
    """
    options = options or GBDOptions()
    rows = []
    for D in counts:
        days = [DayData(day=d, p_load=day.p_load, q_load=day.q_load,
                        p_gen=day.p_gen, label="clone%d" % d)
                for d in range(D)]
        run_opts = dataclasses.replace(options, refine=False)
        t0 = time.perf_counter()
        result = run_gbd(network, days, weights, run_opts)
        wall = time.perf_counter() - t0
        row = timing_row(result.state, D)
        rows.append(row[:-1] + (wall,))
    return rows


def write_timing_table(rows, path):
    return _write_csv(path, _TIMING_COLUMNS, rows)


def loglog_slope(x, y):
    """Least-squares slope of log y against log x."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.size < 2:
        raise ReportError("need at least two points for a slope")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ReportError("log-log fit needs positive data")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
