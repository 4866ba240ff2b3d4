"""Time-series input and stressed boundary conditions.

Hourly bus series arrive as plain CSV (header row of bus ids, one row per
hour); reactive series are reconstructed from a snapshot operating point
via power-factor scaling; ampacity tightening and candidate-site selection
turn a feasible history into a planning case with something to fix.
"""
import csv
import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .acpf import solve_acpf
from .network import CandidateSite
from .opf import DayData


class IngestError(ValueError):
    pass


@dataclass
class TimeSeriesData:
    """Horizon-long hourly series aligned to network bus / generator order.

    load_p, load_q are (T, N) consumption; fixed_gen_p is (T, G) output of
    the non-dispatchable machines (zero rows for the rest). T splits into
    T / day_hours whole days.
    """
    load_p: np.ndarray
    load_q: np.ndarray
    fixed_gen_p: np.ndarray
    day_hours: int = 24

    def __post_init__(self):
        self.load_p = np.asarray(self.load_p, dtype=float)
        self.load_q = np.asarray(self.load_q, dtype=float)
        self.fixed_gen_p = np.asarray(self.fixed_gen_p, dtype=float)
        for name in ("load_p", "load_q", "fixed_gen_p"):
            a = getattr(self, name)
            if a.ndim != 2:
                raise IngestError("%s must be 2-D (hours x elements)" % name)
            if not np.all(np.isfinite(a)):
                raise IngestError("%s contains non-finite entries" % name)
        T = self.load_p.shape[0]
        if self.load_q.shape != self.load_p.shape:
            raise IngestError("load_p and load_q shapes differ")
        if self.fixed_gen_p.shape[0] != T:
            raise IngestError("fixed_gen_p horizon differs from the loads")
        if self.day_hours <= 0:
            raise IngestError("day_hours must be positive")
        if T % self.day_hours:
            raise IngestError("horizon of %d hours does not divide into "
                              "%d-hour days" % (T, self.day_hours))

    @property
    def horizon(self):
        return self.load_p.shape[0]

    @property
    def n_days(self):
        return self.horizon // self.day_hours


def _read_numeric_csv(path):
    """Header row of ids, one numeric row per hour; errors carry file/line."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError("%s: empty file" % path)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestError("%s line %d: expected %d columns, got %d"
                                  % (path, lineno, len(header), len(row)))
            parsed = []
            for col, cell in zip(header, row):
                try:
                    value = float(cell)
                except ValueError:
                    raise IngestError("%s line %d: non-numeric value %r in "
                                      "column %s" % (path, lineno, cell, col))
                if not math.isfinite(value):
                    raise IngestError("%s line %d: non-finite value in "
                                      "column %s" % (path, lineno, col))
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise IngestError("%s: no data rows" % path)
    return header, np.array(rows)


def _column_order(header, ids, path, what):
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise IngestError("%s: duplicate column(s) %s"
                          % (path, ", ".join(dupes)))
    index = {str(i): k for k, i in enumerate(ids)}
    missing = [str(i) for i in ids if str(i) not in header]
    unknown = [h for h in header if h not in index]
    if unknown:
        raise IngestError("%s: unknown %s column(s) %s"
                          % (path, what, ", ".join(unknown)))
    if missing:
        raise IngestError("%s: missing %s column(s) %s"
                          % (path, what, ", ".join(missing)))
    return [header.index(str(i)) for i in ids]


def load_timeseries(path, network, day_hours=24, gen_path=None):
    """Read the active-load series (and optionally fixed generator output).

    Columns may come in any order; the result is realigned to the network's
    bus (and generator) table order. Reactive loads start at zero until
    reconstructed.
    """
    header, data = _read_numeric_csv(path)
    order = _column_order(header, [b.id for b in network.buses], path, "bus")
    load_p = data[:, order]
    T = load_p.shape[0]

    fixed_gen_p = np.zeros((T, network.n_gen))
    if gen_path is not None:
        gheader, gdata = _read_numeric_csv(gen_path)
        if gdata.shape[0] != T:
            raise IngestError("%s: generator series has %d hours, loads have "
                              "%d" % (gen_path, gdata.shape[0], T))
        gen_ids = {str(g.id): k for k, g in enumerate(network.generators)}
        slack_id = str(network.generators[network.slack_gen].id)
        for col, name in enumerate(gheader):
            if name == slack_id:
                raise IngestError("%s: the slack machine %s balances the "
                                  "system; its output is not an input"
                                  % (gen_path, name))
            if name not in gen_ids:
                raise IngestError("%s: unknown generator column %s"
                                  % (gen_path, name))
            fixed_gen_p[:, gen_ids[name]] = gdata[:, col]

    return TimeSeriesData(load_p=load_p, load_q=np.zeros_like(load_p),
                          fixed_gen_p=fixed_gen_p, day_hours=day_hours)


def reconstruct_reactive(ts, network, snapshot_p, snapshot_q):
    """Fill load_q by scaling each bus's active series with a snapshot ratio.

    Load-only buses use their own snapshot Q/P; buses hosting machines
    borrow the ratio of the load-only bus whose snapshot power factor is
    nearest their own, since the machine's reactive output pollutes the
    local snapshot.
    """
    snapshot_p = np.asarray(snapshot_p, dtype=float)
    snapshot_q = np.asarray(snapshot_q, dtype=float)
    if snapshot_p.shape != (network.n_bus,) or snapshot_q.shape != (network.n_bus,):
        raise IngestError("snapshot arrays must be one value per bus")

    gen_buses = set(network.gen_bus_idx.tolist())
    pq = [n for n in range(network.n_bus) if n not in gen_buses]

    def pf(p, q):
        mag = math.hypot(p, q)
        return abs(p) / mag if mag > 0 else 1.0

    ratio = np.zeros(network.n_bus)
    donors = []
    for n in pq:
        p, q = snapshot_p[n], snapshot_q[n]
        if p == 0.0:
            if q != 0.0:
                raise IngestError(
                    "bus %s: reactive snapshot without active power leaves "
                    "the power factor undefined" % network.buses[n].id)
            ratio[n] = 0.0
        else:
            ratio[n] = q / p
        donors.append((pf(p, q), n))

    for n in gen_buses:
        if not np.any(ts.load_p[:, n]):
            continue
        if not donors:
            raise IngestError("bus %s hosts a machine and no load-only bus "
                              "exists to donate a power factor"
                              % network.buses[n].id)
        nominal = pf(snapshot_p[n], snapshot_q[n])
        _, donor = min(donors, key=lambda item: (abs(item[0] - nominal),
                                                 item[1]))
        ratio[n] = ratio[donor]

    return TimeSeriesData(load_p=ts.load_p, load_q=ts.load_p * ratio,
                          fixed_gen_p=ts.fixed_gen_p,
                          day_hours=ts.day_hours)


def synth_timeseries(network, n_days, day_hours=24, seed=0, peak=0.6,
                     q_ratio=0.35, noise=0.05):
    """Seeded sinusoidal daily load shapes with light noise, for desk tests."""
    rng = np.random.default_rng(seed)
    T = n_days * day_hours
    gen_buses = set(network.gen_bus_idx.tolist())
    amplitude = np.array([0.0 if n in gen_buses
                          else peak * rng.uniform(0.4, 1.0)
                          for n in range(network.n_bus)])
    t = np.arange(day_hours)
    shape = 0.6 + 0.4 * np.sin(math.pi * t / max(day_hours - 1, 1))
    load_p = np.vstack([
        np.outer(shape, amplitude) * (1.0 + noise * rng.standard_normal(
            (day_hours, network.n_bus)))
        for _ in range(n_days)])
    load_p = np.clip(load_p, 0.0, None)
    return TimeSeriesData(load_p=load_p, load_q=q_ratio * load_p,
                          fixed_gen_p=np.zeros((T, network.n_gen)),
                          day_hours=day_hours)


def to_days(ts, network):
    """Split the horizon into the per-day blocks the planner consumes."""
    if ts.load_p.shape[1] != network.n_bus:
        raise IngestError("series width %d does not match the %d-bus network"
                          % (ts.load_p.shape[1], network.n_bus))
    if ts.fixed_gen_p.shape[1] != network.n_gen:
        raise IngestError("generator series width %d does not match the %d "
                          "machines" % (ts.fixed_gen_p.shape[1],
                                        network.n_gen))
    P = ts.day_hours
    days = []
    for d in range(ts.n_days):
        block = slice(d * P, (d + 1) * P)
        days.append(DayData(day=d,
                            p_load=ts.load_p[block].T.copy(),
                            q_load=ts.load_q[block].T.copy(),
                            p_gen=ts.fixed_gen_p[block].T.copy(),
                            label="day%d" % d))
    return days


# ---------------------------------------------------------------------------
# boundary conditions

@dataclass
class BoundaryConditionSpec:
    """How to turn a feasible history into a stressed planning case."""
    tighten_factor: float = 0.82
    branches_to_tighten: tuple = ()
    relax_slack_p: bool = False
    candidate_site_rule: str = "explicit"   # or "voltage-violating"
    site_buses: tuple = ()                  # used by the explicit rule
    site_params: dict = None                # CandidateSite overrides

    def __post_init__(self):
        if not 0.0 < self.tighten_factor <= 1.0:
            raise IngestError("tighten factor must lie in (0, 1], got %r"
                              % (self.tighten_factor,))
        if self.candidate_site_rule not in ("explicit", "voltage-violating"):
            raise IngestError("unknown candidate site rule %r"
                              % (self.candidate_site_rule,))


def branch_current_magnitudes(network, vm, va):
    """Per-unit series current of every branch at a solved voltage profile."""
    V = vm * np.exp(1j * va)
    z = network.r + 1j * network.x
    return np.abs((V[network.from_idx] - V[network.to_idx]) / z)


def baseline_states(network, ts):
    """Hour-by-hour power flow over the history; storage absent."""
    gen_p_bus = np.zeros((ts.horizon, network.n_bus))
    for g, bus in enumerate(network.gen_bus_idx):
        if g != network.slack_gen:
            gen_p_bus[:, bus] += ts.fixed_gen_p[:, g]
    states = []
    for t in range(ts.horizon):
        state = solve_acpf(network, gen_p_bus[t] - ts.load_p[t],
                           -ts.load_q[t])
        if not state.converged:
            raise IngestError("baseline power flow failed to converge at "
                              "hour %d" % t)
        states.append(state)
    return states


def generate_boundary_conditions(network, ts, spec):
    """Tighten ampacities against the historical maxima and place sites.

    Each selected branch's limit becomes tighten_factor times its largest
    solved current over the horizon, so a factor of 1.0 keeps the history
    feasible and anything smaller manufactures congestion.
    """
    states = baseline_states(network, ts)
    currents = np.stack([branch_current_magnitudes(network, s.vm, s.va)
                         for s in states], axis=1)
    i_hist = currents.max(axis=1)

    branch_pos = {l.id: k for k, l in enumerate(network.branches)}
    selected = []
    for bid in spec.branches_to_tighten:
        if bid not in branch_pos:
            raise IngestError("unknown branch %r in the tightening list"
                              % (bid,))
        selected.append(branch_pos[bid])

    branches = list(network.branches)
    for k in selected:
        if i_hist[k] <= 0.0:
            raise IngestError("branch %s carries no current in the baseline; "
                              "nothing to tighten" % branches[k].id)
        branches[k] = dataclasses.replace(
            branches[k], i_max=spec.tighten_factor * i_hist[k])

    generators = list(network.generators)
    if spec.relax_slack_p:
        slack = generators[network.slack_gen]
        generators[network.slack_gen] = dataclasses.replace(
            slack, p_min=-1e4, p_max=1e4)

    params = spec.site_params or {}
    if spec.candidate_site_rule == "voltage-violating":
        vm2 = np.stack([s.vm ** 2 for s in states], axis=1)
        low = vm2.min(axis=1) < network.v_min - 1e-9
        high = vm2.max(axis=1) > network.v_max + 1e-9
        site_buses = [network.buses[n].id
                      for n in np.flatnonzero(low | high)]
        if not site_buses and not selected:
            raise IngestError("nothing to tighten: no ampacity selection and "
                              "no voltage violations in the baseline")
    else:
        site_buses = list(spec.site_buses)

    if site_buses:
        sites = tuple(CandidateSite("s%s" % bus, bus, **params)
                      for bus in site_buses)
    else:
        sites = network.candidate_sites

    return network.copy_with(branches=tuple(branches),
                             generators=tuple(generators),
                             candidate_sites=sites)
