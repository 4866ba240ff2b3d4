"""Grid data model: buses, branches, generators, candidate storage sites.

All electrical quantities are stored per unit on a common MVA base. Bus
voltage limits are on the squared magnitude, which is the voltage variable
used by the dispatch models (the drop equation is linear in it and the loss
cone divides by it).
"""

import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp


class NetworkError(ValueError):
    """Structurally invalid network data."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str = "pq"          # slack | pv | pq
    g_shunt: float = 0.0      # p.u. conductance
    b_shunt: float = 0.0      # p.u. susceptance
    v_min: float = 0.81       # squared-magnitude bounds
    v_max: float = 1.21
    base_kv: float = 1.0


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int             # sending end
    to_bus: int               # receiving end
    r: float
    x: float
    theta_max: float = math.pi / 6   # endpoint angle-difference limit, rad
    i_max: float = 10.0              # ampacity, p.u. current magnitude


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = 0.0
    q_max: float = 0.0
    v_set: float = 1.0        # magnitude setpoint, p.u.
    is_condenser: bool = False


@dataclass(frozen=True)
class CandidateSite:
    id: int
    bus: int
    w_min: float = 0.0        # rated power bounds, p.u.
    w_max: float = 1.0
    c_min: float = 0.0        # rated energy bounds, p.u. h
    c_max: float = 4.0
    c_rate: float = 1.0       # max power per unit energy, 1/h
    ic_p: float = 1.0         # install cost per unit rated power
    ic_e: float = 1.0         # install cost per unit rated energy
    soe_min: float = 0.1      # state-of-energy band, fraction of rating
    soe_max: float = 0.9


class NetworkModel:
    """Validated grid with incidence matrices; treat as immutable after build.

    A_s / A_r are branch-by-node selectors of the sending / receiving end
    (one unit entry per row); A_plus / A_minus are their transposes. Numpy
    views of the per-element data (r, x, limits, shunts) are exposed as
    arrays indexed in table order.
    """

    def __init__(self, buses, branches, generators, candidate_sites=(), base_mva=100.0):
        self.buses = tuple(buses)
        self.branches = tuple(branches)
        self.generators = tuple(generators)
        self.candidate_sites = tuple(candidate_sites)
        self.base_mva = float(base_mva)

        self.bus_index = {b.id: i for i, b in enumerate(self.buses)}
        if len(self.bus_index) != len(self.buses):
            raise NetworkError("duplicate bus ids")
        self._validate_elements()

        self.A_plus, self.A_minus, self.A_s, self.A_r = build_incidence(self)

        self.from_idx = np.array([self.bus_index[l.from_bus] for l in self.branches], dtype=int)
        self.to_idx = np.array([self.bus_index[l.to_bus] for l in self.branches], dtype=int)
        self.r = np.array([l.r for l in self.branches])
        self.x = np.array([l.x for l in self.branches])
        self.theta_max = np.array([l.theta_max for l in self.branches])
        self.i_max = np.array([l.i_max for l in self.branches])
        self.g_shunt = np.array([b.g_shunt for b in self.buses])
        self.b_shunt = np.array([b.b_shunt for b in self.buses])
        self.v_min = np.array([b.v_min for b in self.buses])
        self.v_max = np.array([b.v_max for b in self.buses])
        self.gen_bus_idx = np.array([self.bus_index[g.bus] for g in self.generators], dtype=int)
        self.site_bus_idx = np.array([self.bus_index[s.bus] for s in self.candidate_sites], dtype=int)

        slack = [i for i, b in enumerate(self.buses) if b.kind == "slack"]
        if len(slack) != 1:
            raise NetworkError("expected exactly one slack bus, found %d" % len(slack))
        self.slack_bus = slack[0]
        at_slack = [i for i, g in enumerate(self.generators)
                    if self.gen_bus_idx[i] == self.slack_bus]
        if not at_slack:
            raise NetworkError("slack bus %s hosts no generator" % self.buses[self.slack_bus].id)
        self.slack_gen = at_slack[0]

        self._check_connected()

    @property
    def n_bus(self):
        return len(self.buses)

    @property
    def n_branch(self):
        return len(self.branches)

    @property
    def n_gen(self):
        return len(self.generators)

    @property
    def n_site(self):
        return len(self.candidate_sites)

    def _validate_elements(self):
        for b in self.buses:
            if b.kind not in ("slack", "pv", "pq"):
                raise NetworkError("bus %s: unknown kind %r" % (b.id, b.kind))
            if not (0.0 < b.v_min < b.v_max):
                raise NetworkError("bus %s: need 0 < v_min < v_max" % b.id)
            if b.base_kv <= 0.0:
                raise NetworkError("bus %s: base_kv must be positive" % b.id)
        for l in self.branches:
            if l.from_bus not in self.bus_index or l.to_bus not in self.bus_index:
                raise NetworkError("branch %s: dangling endpoint (%s -> %s)"
                                   % (l.id, l.from_bus, l.to_bus))
            if l.x <= 0.0:
                raise NetworkError("branch %s: reactance must be positive" % l.id)
            if l.r < 0.0:
                raise NetworkError("branch %s: negative resistance" % l.id)
            if not (0.0 < l.theta_max < math.pi / 2):
                raise NetworkError("branch %s: theta_max must lie in (0, pi/2)" % l.id)
            if l.i_max <= 0.0:
                raise NetworkError("branch %s: ampacity must be positive" % l.id)
        for g in self.generators:
            if g.bus not in self.bus_index:
                raise NetworkError("generator %s: unknown bus %s" % (g.id, g.bus))
            if g.p_min > g.p_max or g.q_min > g.q_max:
                raise NetworkError("generator %s: inverted limits" % g.id)
            if g.is_condenser and (g.p_min != 0.0 or g.p_max != 0.0):
                raise NetworkError("generator %s: condenser must have zero active limits" % g.id)
        for s in self.candidate_sites:
            if s.bus not in self.bus_index:
                raise NetworkError("site %s: unknown bus %s" % (s.id, s.bus))
            if not (0.0 <= s.w_min <= s.w_max):
                raise NetworkError("site %s: bad power bounds" % s.id)
            if not (0.0 <= s.c_min <= s.c_max):
                raise NetworkError("site %s: bad energy bounds" % s.id)
            if not (0.0 <= s.soe_min < s.soe_max <= 1.0):
                raise NetworkError("site %s: bad state-of-energy band" % s.id)
            if s.c_rate <= 0.0:
                raise NetworkError("site %s: c_rate must be positive" % s.id)

    def adjacency(self):
        """Per-bus list of (branch index, neighbor bus index, +1 if leaving)."""
        adj = [[] for _ in range(self.n_bus)]
        for k, l in enumerate(self.branches):
            i, j = self.bus_index[l.from_bus], self.bus_index[l.to_bus]
            adj[i].append((k, j, +1))
            adj[j].append((k, i, -1))
        return adj

    def _components(self):
        adj = self.adjacency()
        seen = np.zeros(self.n_bus, dtype=bool)
        comps = []
        for root in range(self.n_bus):
            if seen[root]:
                continue
            comp, queue = [], deque([root])
            seen[root] = True
            while queue:
                u = queue.popleft()
                comp.append(u)
                for _, v, _ in adj[u]:
                    if not seen[v]:
                        seen[v] = True
                        queue.append(v)
            comps.append(comp)
        return comps

    def _check_connected(self):
        comps = self._components()
        if len(comps) > 1:
            named = ["{" + ", ".join(str(self.buses[i].id) for i in c) + "}" for c in comps]
            raise NetworkError("network is disconnected; components: " + ", ".join(named))

    def copy_with(self, buses=None, branches=None, generators=None, candidate_sites=None):
        return NetworkModel(
            self.buses if buses is None else buses,
            self.branches if branches is None else branches,
            self.generators if generators is None else generators,
            self.candidate_sites if candidate_sites is None else candidate_sites,
            self.base_mva,
        )


def build_incidence(network):
    """Sending/receiving incidence matrices (A_plus, A_minus, A_s, A_r).

    A_s and A_r are L-by-N with a single unit entry per row at the sending
    and receiving bus respectively, so (A_s - A_r) maps nodal quantities to
    branch endpoint differences.
    """
    n, m = len(network.buses), len(network.branches)
    rows = np.arange(m)
    from_cols, to_cols = [], []
    for l in network.branches:
        if l.from_bus not in network.bus_index or l.to_bus not in network.bus_index:
            raise NetworkError("branch %s: dangling endpoint (%s -> %s)"
                               % (l.id, l.from_bus, l.to_bus))
        from_cols.append(network.bus_index[l.from_bus])
        to_cols.append(network.bus_index[l.to_bus])
    ones = np.ones(m)
    A_s = sp.csr_matrix((ones, (rows, from_cols)), shape=(m, n))
    A_r = sp.csr_matrix((ones, (rows, to_cols)), shape=(m, n))
    return A_s.T.tocsr(), A_r.T.tocsr(), A_s, A_r


@dataclass(frozen=True)
class CycleBasis:
    """Fundamental cycles as tuples of (branch index, sign along the walk)."""
    cycles: tuple

    def __len__(self):
        return len(self.cycles)


def find_cycle_basis(network):
    """Fundamental cycle basis from a breadth-first spanning tree.

    Each non-tree branch induces exactly one cycle, listed in walk order
    starting along that branch; signs are +1 where the walk follows the
    branch orientation. Raises on disconnected input.
    """
    network._check_connected()
    adj = network.adjacency()
    n = network.n_bus
    parent = np.full(n, -1, dtype=int)
    tree_edge = {}        # child bus -> (branch idx, +1 if branch runs parent->child)
    in_tree = np.zeros(network.n_branch, dtype=bool)
    seen = np.zeros(n, dtype=bool)
    if n:
        seen[0] = True
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for k, v, direction in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    parent[v] = u
                    tree_edge[v] = (k, direction)
                    in_tree[k] = True
                    queue.append(v)

    def path_up(u):
        # list of (branch, direction) from u to the root
        out = []
        while parent[u] >= 0:
            out.append(tree_edge[u])
            u = parent[u]
        return out

    def depth(u):
        d = 0
        while parent[u] >= 0:
            d += 1
            u = parent[u]
        return d

    cycles = []
    for k in np.nonzero(~in_tree)[0]:
        u = network.bus_index[network.branches[k].from_bus]
        v = network.bus_index[network.branches[k].to_bus]
        if u == v:
            cycles.append(((int(k), +1),))
            continue
        # climb to a common ancestor
        up_u, up_v = [], []
        a, b = u, v
        da, db = depth(a), depth(b)
        while da > db:
            up_u.append(tree_edge[a]); a = parent[a]; da -= 1
        while db > da:
            up_v.append(tree_edge[b]); b = parent[b]; db -= 1
        while a != b:
            up_u.append(tree_edge[a]); a = parent[a]
            up_v.append(tree_edge[b]); b = parent[b]
        walk = [(int(k), +1)]
        walk += [(int(bk), -d) for bk, d in up_v]
        walk += [(int(bk), +d) for bk, d in reversed(up_u)]
        cycles.append(tuple(walk))
    return CycleBasis(tuple(cycles))


# ---------------------------------------------------------------------------
# raw (physical-unit) tables and per-unit conversion

@dataclass(frozen=True)
class RawBus:
    id: int
    kind: str = "pq"
    g_shunt_mw: float = 0.0     # consumption at nominal voltage
    b_shunt_mvar: float = 0.0   # injection at nominal voltage
    v_min_kv: float = 0.0
    v_max_kv: float = 0.0
    base_kv: float = 1.0


@dataclass(frozen=True)
class RawBranch:
    id: int
    from_bus: int
    to_bus: int
    r_ohm: float
    x_ohm: float
    theta_max: float = math.pi / 6
    i_max_ka: float = 1.0


@dataclass(frozen=True)
class RawGenerator:
    id: int
    bus: int
    p_min_mw: float = 0.0
    p_max_mw: float = 0.0
    q_min_mvar: float = 0.0
    q_max_mvar: float = 0.0
    v_set: float = 1.0
    is_condenser: bool = False


@dataclass(frozen=True)
class RawSite:
    id: int
    bus: int
    w_min_mw: float = 0.0
    w_max_mw: float = 100.0
    c_min_mwh: float = 0.0
    c_max_mwh: float = 400.0
    c_rate: float = 1.0
    ic_p_per_mw: float = 1.0
    ic_e_per_mwh: float = 1.0
    soe_min: float = 0.1
    soe_max: float = 0.9


@dataclass(frozen=True)
class RawNetwork:
    buses: tuple
    branches: tuple
    generators: tuple
    candidate_sites: tuple = ()


def to_per_unit(raw, base_mva):
    """Convert a RawNetwork (MW / Mvar / ohm / kA / kV) to a NetworkModel.

    Impedance base is base_kv^2 / base_MVA at the sending bus; current base
    is base_MVA / (sqrt(3) base_kv). Costs become currency per p.u. quantity
    by scaling with base_MVA, so unit MW costs stay unit p.u. costs on a
    1 MVA base.
    """
    if base_mva <= 0.0:
        raise NetworkError("base MVA must be positive")
    kv = {}
    for b in raw.buses:
        if b.base_kv <= 0.0:
            raise NetworkError("bus %s: base_kv must be positive" % b.id)
        kv[b.id] = b.base_kv
    buses = tuple(
        Bus(b.id, b.kind,
            g_shunt=b.g_shunt_mw / base_mva,
            b_shunt=b.b_shunt_mvar / base_mva,
            v_min=(b.v_min_kv / b.base_kv) ** 2,
            v_max=(b.v_max_kv / b.base_kv) ** 2,
            base_kv=b.base_kv)
        for b in raw.buses)
    branches = []
    for l in raw.branches:
        if l.from_bus not in kv or l.to_bus not in kv:
            raise NetworkError("branch %s: dangling endpoint (%s -> %s)"
                               % (l.id, l.from_bus, l.to_bus))
        z_base = kv[l.from_bus] ** 2 / base_mva
        i_base = base_mva / (math.sqrt(3.0) * kv[l.from_bus])
        branches.append(Branch(l.id, l.from_bus, l.to_bus,
                               r=l.r_ohm / z_base, x=l.x_ohm / z_base,
                               theta_max=l.theta_max,
                               i_max=l.i_max_ka / i_base))
    generators = tuple(
        Generator(g.id, g.bus,
                  p_min=g.p_min_mw / base_mva, p_max=g.p_max_mw / base_mva,
                  q_min=g.q_min_mvar / base_mva, q_max=g.q_max_mvar / base_mva,
                  v_set=g.v_set, is_condenser=g.is_condenser)
        for g in raw.generators)
    sites = tuple(
        CandidateSite(s.id, s.bus,
                      w_min=s.w_min_mw / base_mva, w_max=s.w_max_mw / base_mva,
                      c_min=s.c_min_mwh / base_mva, c_max=s.c_max_mwh / base_mva,
                      c_rate=s.c_rate,
                      ic_p=s.ic_p_per_mw * base_mva, ic_e=s.ic_e_per_mwh * base_mva,
                      soe_min=s.soe_min, soe_max=s.soe_max)
        for s in raw.candidate_sites)
    return NetworkModel(buses, tuple(branches), generators, sites, base_mva)


def from_per_unit(network):
    """Inverse of to_per_unit on the stored base; round-trips within 1e-12."""
    base = network.base_mva
    buses = tuple(
        RawBus(b.id, b.kind,
               g_shunt_mw=b.g_shunt * base,
               b_shunt_mvar=b.b_shunt * base,
               v_min_kv=math.sqrt(b.v_min) * b.base_kv,
               v_max_kv=math.sqrt(b.v_max) * b.base_kv,
               base_kv=b.base_kv)
        for b in network.buses)
    kv = {b.id: b.base_kv for b in network.buses}
    branches = tuple(
        RawBranch(l.id, l.from_bus, l.to_bus,
                  r_ohm=l.r * kv[l.from_bus] ** 2 / base,
                  x_ohm=l.x * kv[l.from_bus] ** 2 / base,
                  theta_max=l.theta_max,
                  i_max_ka=l.i_max * base / (math.sqrt(3.0) * kv[l.from_bus]))
        for l in network.branches)
    generators = tuple(
        RawGenerator(g.id, g.bus,
                     p_min_mw=g.p_min * base, p_max_mw=g.p_max * base,
                     q_min_mvar=g.q_min * base, q_max_mvar=g.q_max * base,
                     v_set=g.v_set, is_condenser=g.is_condenser)
        for g in network.generators)
    sites = tuple(
        RawSite(s.id, s.bus,
                w_min_mw=s.w_min * base, w_max_mw=s.w_max * base,
                c_min_mwh=s.c_min * base, c_max_mwh=s.c_max * base,
                c_rate=s.c_rate,
                ic_p_per_mw=s.ic_p / base, ic_e_per_mwh=s.ic_e / base,
                soe_min=s.soe_min, soe_max=s.soe_max)
        for s in network.candidate_sites)
    return RawNetwork(buses, branches, generators, sites)
