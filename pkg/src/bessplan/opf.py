"""Hourly dispatch programs over the cone relaxation of the power flow.

One set of constraint generators feeds every program variant: the per-day
subproblem with its storage fleet pinned to a trial rating (and its
feasibility-check twin, which differs only in the linking rows and the
objective), the monolithic siting-and-sizing program over the whole horizon,
and the linear flow approximations used for cross-checks.
"""

import hashlib
import math
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .conic import ConicProgram, ConicProgramError


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class DispatchWeights:
    """Objective weights and relaxation switches shared by all builders.

    loss_mode "quadratic" prices squared reactive losses; "linear" prices the
    loss epigraph instead, which is cheaper but loosens the relaxation on
    meshed grids. relax_slack_p / relax_v_limits widen the corresponding
    operational boxes, used when infeasibility must be ruled out by
    construction. dc_weight prices slack-bus power in the linear-flow
    variants.
    """

    w_loss: float = 1.0
    w_slack: float = 1.0e3
    oc: float = 1.0
    loss_mode: str = "quadratic"
    dt: float = 1.0
    angle_bound: float = math.pi
    init_soe_factor: float = 0.5
    capex_scale: float = 1.0
    relax_slack_p: bool = False
    relax_v_limits: bool = False
    slack_relax_bound: float = 1.0e4
    dc_weight: float = 1.0

    def oc_vector(self, n_branch):
        oc = np.asarray(self.oc, dtype=float)
        return np.full(n_branch, float(oc)) if oc.ndim == 0 else oc


@dataclass
class DayData:
    day: int
    p_load: np.ndarray      # (N, P) consumed active power
    q_load: np.ndarray
    p_gen: np.ndarray       # (n_gen, P) dispatch; the slack machine row is ignored
    label: str = ""

    @property
    def hours(self):
        return self.p_load.shape[1]

    def key(self):
        h = hashlib.sha256()
        for a in (self.p_load, self.q_load, self.p_gen):
            h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
        return h.hexdigest()


def check_day(network, day):
    n, g = network.n_bus, network.n_gen
    P = day.hours
    for name in ("p_load", "q_load"):
        a = getattr(day, name)
        if a.shape != (n, P):
            raise ModelError("%s must be (%d, %d), got %s" % (name, n, P, a.shape))
        if not np.all(np.isfinite(a)):
            raise ModelError("%s contains non-finite entries" % name)
    if day.p_gen.shape != (g, P):
        raise ModelError("p_gen must be (%d, %d), got %s" % (g, P, day.p_gen.shape))
    for i, gen in enumerate(network.generators):
        if gen.is_condenser and np.any(day.p_gen[i] != 0.0):
            raise ModelError("condenser %s has nonzero active dispatch" % gen.id)
    return P


def _scatter(n, idx, m):
    """n-by-m matrix placing column j at row idx[j]."""
    M = np.zeros((n, m))
    for j, i in enumerate(idx):
        M[i, j] += 1.0
    return M


def _structure(network):
    # a second machine on the slack bus still dispatches like any other
    slack = network.slack_bus
    nonslack_gens = [i for i in range(network.n_gen) if i != network.slack_gen]
    return slack, nonslack_gens


def _flat(expr, shape):
    return cp.reshape(expr, (shape[0] * shape[1],), order="C")


def _const_rows(vec, P):
    return np.repeat(np.asarray(vec, dtype=float)[:, None], P, axis=1)


def _emit_grid_hours(prog, network, weights, day, h):
    """All grid rows for one day's block of hours.

    h holds the variable slices: V, theta, p, q (N,P); theta_l, p_send,
    q_send, p_loss, q_loss, k_loss (L,P); slack_p, slack_q (P,);
    gen_q (G,P); sto_p, sto_q (S,P) or None.
    """
    N, L = network.n_bus, network.n_branch
    P = day.hours
    slack, nonslack = _structure(network)
    A_plus, A_minus = network.A_plus, network.A_minus
    A_s, A_r = network.A_s, network.A_r
    R, X = network.r, network.x

    # net injections against branch flows and shunt draw
    Rm, Xm = _const_rows(R, P), _const_rows(X, P)
    Gm, Bm = _const_rows(network.g_shunt, P), _const_rows(network.b_shunt, P)
    prog.add_equality(
        h.p, (A_plus - A_minus) @ h.p_send + A_minus @ h.p_loss + cp.multiply(Gm, h.V),
        label="balance-p")
    prog.add_equality(
        h.q, (A_plus - A_minus) @ h.q_send + A_minus @ h.q_loss - cp.multiply(Bm, h.V),
        label="balance-q")

    # net injections against machines, storage and load
    gen_p_bus = np.zeros((N, P))
    for i in nonslack:
        gen_p_bus[network.gen_bus_idx[i], :] += day.p_gen[i, :]
    e_slack = np.zeros((N, 1))
    e_slack[slack, 0] = 1.0
    M_gq = _scatter(N, [network.gen_bus_idx[i] for i in nonslack], len(nonslack))
    p_rhs = gen_p_bus + e_slack @ cp.reshape(h.slack_p, (1, P), order="C")
    q_rhs = e_slack @ cp.reshape(h.slack_q, (1, P), order="C")
    if len(nonslack):
        q_rhs = q_rhs + M_gq @ h.gen_q
    if h.sto_p is not None:
        S_map = _scatter(N, network.site_bus_idx, network.n_site)
        p_rhs = p_rhs - S_map @ h.sto_p
        q_rhs = q_rhs - S_map @ h.sto_q
    prog.add_equality(h.p, p_rhs - day.p_load, label="injection-p")
    prog.add_equality(h.q, q_rhs - day.q_load, label="injection-q")

    # branch voltage drop, angle surrogate and its tie to nodal angles
    prog.add_equality((A_s - A_r) @ h.V,
                      2 * cp.multiply(Rm, h.p_send) + 2 * cp.multiply(Xm, h.q_send)
                      - cp.multiply(Rm, h.p_loss) - cp.multiply(Xm, h.q_loss),
                      label="volt-drop")
    prog.add_equality(h.theta_l, cp.multiply(Xm, h.p_send) - cp.multiply(Rm, h.q_send),
                      label="angle-proxy")
    prog.add_equality(h.theta_l, (A_s - A_r) @ h.theta, label="angle-diff")

    # reactive loss cone, its epigraph, and the loss ratio tying p to q losses
    f = network.from_idx
    V_s = h.V[f, :]
    prog.add_rotated_soc(
        _flat(cp.multiply(_const_rows(0.5 / X, P), h.q_loss), (L, P)),
        _flat(V_s, (L, P)),
        cp.vstack([_flat(h.p_send, (L, P)), _flat(h.q_send, (L, P))]),
        label="loss-cone")
    prog.add_inequality(h.q_loss, h.k_loss, label="loss-cap")
    prog.add_equality(cp.multiply(Xm, h.p_loss), cp.multiply(Rm, h.q_loss),
                      label="loss-ratio")

    # angle-consistency cone and plain angle boxes
    t = network.to_idx
    sin2 = np.sin(network.theta_max) ** 2
    prog.add_rotated_soc(
        _flat(cp.multiply(_const_rows(0.5 * sin2, P), V_s), (L, P)),
        _flat(h.V[t, :], (L, P)),
        _flat(h.theta_l, (L, P)),
        label="angle-cone")
    th_max = _const_rows(network.theta_max, P)
    prog.add_box(h.theta_l, -th_max, th_max, label="angle-box")

    # ampacity enters through the loss epigraph: K bounded by X i_max^2
    prog.add_inequality(h.k_loss, _const_rows(X * network.i_max ** 2, P),
                        label="ampacity")

    # voltage and angle operating boxes
    if weights.relax_v_limits:
        v_lo, v_hi = np.full(N, 0.25), np.full(N, 4.0)
    else:
        v_lo, v_hi = network.v_min, network.v_max
    prog.add_box(h.V, _const_rows(v_lo, P), _const_rows(v_hi, P), label="v-box")
    prog.add_box(h.theta, -weights.angle_bound, weights.angle_bound, label="theta-box")

    # slack machine rows: reference angle, pinned voltage, power boxes
    sg = network.generators[network.slack_gen]
    prog.add_equality(h.theta[slack, :], np.zeros(P), label="slack-ref")
    prog.add_equality(h.V[slack, :], np.full(P, sg.v_set ** 2), label="slack-v")
    if weights.relax_slack_p:
        p_lo, p_hi = -weights.slack_relax_bound, weights.slack_relax_bound
    else:
        p_lo, p_hi = sg.p_min, sg.p_max
    prog.add_box(h.slack_p, p_lo, p_hi, label="slack-p-box")
    prog.add_box(h.slack_q, sg.q_min, sg.q_max, label="slack-q-box")

    # remaining machines: reactive boxes only, active dispatch is data
    if len(nonslack):
        q_lo = _const_rows([network.generators[i].q_min for i in nonslack], P)
        q_hi = _const_rows([network.generators[i].q_max for i in nonslack], P)
        prog.add_box(h.gen_q, q_lo, q_hi, label="gen-q-box")

    # hourly fleet balancing-market neutrality
    if h.sto_p is not None and network.n_site > 0:
        prog.add_equality(cp.sum(h.sto_p, axis=0), np.zeros(P), label="fleet-neutral")


def _emit_storage_day(prog, network, weights, P, sto_p, sto_q, e_block, w, c,
                      with_box=True):
    """Per-day storage rows against one (S, P+1) state-of-energy block."""
    S = network.n_site
    soe_min = np.array([s.soe_min for s in network.candidate_sites])
    soe_max = np.array([s.soe_max for s in network.candidate_sites])

    prog.add_equality(e_block[:, 1:], e_block[:, :-1] + weights.dt * sto_p,
                      label="soe-step")
    rep = np.repeat(np.arange(S), P)
    prog.add_soc(cp.vstack([_flat(sto_p, (S, P)), _flat(sto_q, (S, P))]),
                 w[rep], label="conv-cone")
    if with_box:
        ones = np.ones((1, P + 1))
        lo = cp.reshape(cp.multiply(soe_min, c), (S, 1), order="C") @ ones
        hi = cp.reshape(cp.multiply(soe_max, c), (S, 1), order="C") @ ones
        prog.add_box(e_block, lo, hi, label="soe-box")
    prog.add_equality(e_block[:, 0], e_block[:, P], label="soe-cycle")
    prog.add_equality(e_block[:, 0],
                      cp.multiply(weights.init_soe_factor * (soe_max - soe_min), c),
                      label="soe-init")


def _site_arrays(network):
    sites = network.candidate_sites
    return (np.array([s.w_min for s in sites]), np.array([s.w_max for s in sites]),
            np.array([s.c_min for s in sites]), np.array([s.c_max for s in sites]),
            np.array([s.c_rate for s in sites]),
            np.array([s.ic_p for s in sites]), np.array([s.ic_e for s in sites]))


def _day_block_vars(prog, network, P, suffix=""):
    from types import SimpleNamespace
    N, L = network.n_bus, network.n_branch
    _, nonslack = _structure(network)
    G = len(nonslack)
    v = SimpleNamespace()
    v.V = prog.add_variable("V" + suffix, (N, P))
    v.theta = prog.add_variable("theta" + suffix, (N, P))
    v.p = prog.add_variable("p" + suffix, (N, P))
    v.q = prog.add_variable("q" + suffix, (N, P))
    v.theta_l = prog.add_variable("theta_l" + suffix, (L, P))
    v.p_send = prog.add_variable("p_send" + suffix, (L, P))
    v.q_send = prog.add_variable("q_send" + suffix, (L, P))
    v.p_loss = prog.add_variable("p_loss" + suffix, (L, P))
    v.q_loss = prog.add_variable("q_loss" + suffix, (L, P))
    v.k_loss = prog.add_variable("k_loss" + suffix, (L, P))
    v.slack_p = prog.add_variable("slack_p" + suffix, (P,))
    v.slack_q = prog.add_variable("slack_q" + suffix, (P,))
    v.gen_q = prog.add_variable("gen_q" + suffix, (G, P)) if G else None
    return v


def _loss_objective(network, weights, q_loss, k_loss):
    oc = weights.oc_vector(network.n_branch)
    if weights.loss_mode == "quadratic":
        per_branch = cp.sum(cp.square(q_loss), axis=1)
    elif weights.loss_mode == "linear":
        per_branch = cp.sum(k_loss, axis=1)
    else:
        raise ModelError("unknown loss_mode %r" % weights.loss_mode)
    return weights.w_loss * (oc @ per_branch)


def build_subproblem(network, day, weights):
    """One day's dispatch with the fleet rating pinned to trial values.

    The trial ratings enter as parameters so the compiled program re-solves
    cheaply as the coordination loop updates them; their equality rows carry
    the sensitivities the coordination cuts are built from.
    """
    P = check_day(network, day)
    S = network.n_site
    prog = ConicProgram(name="day%d" % day.day)
    h = _day_block_vars(prog, network, P)
    if S:
        h.sto_p = prog.add_variable("sto_p", (S, P))
        h.sto_q = prog.add_variable("sto_q", (S, P))
        soe = prog.add_variable("soe", (S, P + 1))
        w = prog.add_variable("w", (S,))
        c = prog.add_variable("c", (S,))
    else:
        h.sto_p = h.sto_q = None

    _emit_grid_hours(prog, network, weights, day, h)
    if S:
        _, _, _, _, c_rate, _, _ = _site_arrays(network)
        _emit_storage_day(prog, network, weights, P, h.sto_p, h.sto_q, soe, w, c)
        prog.add_inequality(w, cp.multiply(c_rate, c), label="crate")
        w_hat = prog.add_parameter("w_hat", (S,))
        c_hat = prog.add_parameter("c_hat", (S,))
        prog.add_equality(w, w_hat, tag="link_w", label="link-w")
        prog.add_equality(c, c_hat, tag="link_c", label="link-c")
    prog.add_objective(_loss_objective(network, weights, h.q_loss, h.k_loss),
                       label="loss-cost")
    return prog


def build_feasibility_subproblem(network, day, weights):
    """Same body as the day subproblem, with slacked linking rows.

    The objective prices only the linking slacks — losses must stay out so
    the optimum is a pure infeasibility measure; a positive value certifies
    the trial rating cannot serve this day.
    """
    P = check_day(network, day)
    S = network.n_site
    if S == 0:
        raise ModelError("feasibility subproblem needs at least one candidate site")
    prog = ConicProgram(name="day%d-feas" % day.day)
    h = _day_block_vars(prog, network, P)
    h.sto_p = prog.add_variable("sto_p", (S, P))
    h.sto_q = prog.add_variable("sto_q", (S, P))
    soe = prog.add_variable("soe", (S, P + 1))
    w = prog.add_variable("w", (S,))
    c = prog.add_variable("c", (S,))
    s_w = prog.add_variable("s_w", (S,))
    s_c = prog.add_variable("s_c", (S,))

    _emit_grid_hours(prog, network, weights, day, h)
    _, _, _, _, c_rate, _, _ = _site_arrays(network)
    _emit_storage_day(prog, network, weights, P, h.sto_p, h.sto_q, soe, w, c)
    prog.add_inequality(w, cp.multiply(c_rate, c), label="crate")
    w_hat = prog.add_parameter("w_hat", (S,))
    c_hat = prog.add_parameter("c_hat", (S,))
    prog.add_equality(w, w_hat + s_w, tag="link_w", label="link-w")
    prog.add_equality(c, c_hat + s_c, tag="link_c", label="link-c")
    prog.add_inequality(np.zeros(S), s_w, label="slack-nonneg")
    prog.add_inequality(np.zeros(S), s_c, label="slack-nonneg")
    prog.add_objective(weights.w_slack * (cp.sum(s_w) + cp.sum(s_c)),
                       label="slack-cost")
    return prog


def build_centralized(network, days, weights, relax_integrality=True):
    """Whole-horizon siting and sizing in one program.

    Day blocks reuse the grid and storage generators of the subproblems; the
    state of energy is one chain per site across the horizon with per-day
    reset rows, and siting enters through the rating boxes.
    """
    if not days:
        raise ModelError("no days given")
    S = network.n_site
    if S == 0:
        raise ModelError("centralized program needs candidate sites")
    P = check_day(network, days[0])
    for d in days[1:]:
        if check_day(network, d) != P:
            raise ModelError("all days must share the hour count")
    D = len(days)
    T = D * P

    prog = ConicProgram(name="monolith")
    # the relaxation keeps u in the unit box via nonnegativity plus site-on
    u = prog.add_variable("u", (S,), nonneg=relax_integrality,
                          boolean=not relax_integrality)
    w = prog.add_variable("w", (S,))
    c = prog.add_variable("c", (S,))
    soe = prog.add_variable("soe", (S, T + 1))

    w_min, w_max, c_min, c_max, c_rate, ic_p, ic_e = _site_arrays(network)
    opex_terms = []
    day_points = []
    for k, day in enumerate(days):
        h = _day_block_vars(prog, network, P, suffix="_d%d" % k)
        h.sto_p = prog.add_variable("sto_p_d%d" % k, (S, P))
        h.sto_q = prog.add_variable("sto_q_d%d" % k, (S, P))
        _emit_grid_hours(prog, network, weights, day, h)
        _emit_storage_day(prog, network, weights, P, h.sto_p, h.sto_q,
                          soe[:, k * P:(k + 1) * P + 1], w, c, with_box=False)
        opex_terms.append(_loss_objective(network, weights, h.q_loss, h.k_loss))
        day_points.append(h)

    ones = np.ones((1, T + 1))
    soe_min = np.array([s.soe_min for s in network.candidate_sites])
    soe_max = np.array([s.soe_max for s in network.candidate_sites])
    lo = cp.reshape(cp.multiply(soe_min, c), (S, 1), order="C") @ ones
    hi = cp.reshape(cp.multiply(soe_max, c), (S, 1), order="C") @ ones
    prog.add_box(soe, lo, hi, label="soe-box")

    prog.add_box(w, cp.multiply(w_min, u), cp.multiply(w_max, u), label="site-w")
    prog.add_box(c, cp.multiply(c_min, u), cp.multiply(c_max, u), label="site-c")
    prog.add_inequality(w, cp.multiply(c_rate, c), label="crate")
    prog.add_inequality(u, np.ones(S), label="site-on")

    capex = ic_p @ w + ic_e @ c
    prog.add_objective(weights.capex_scale * capex + cp.sum(cp.hstack(opex_terms)),
                       label="total-cost")
    prog._day_handles = day_points    # builder-private, used by extractors
    return prog


# ---------------------------------------------------------------------------
# linear (angle/flow) variants

def _emit_dc_day(prog, network, weights, day, theta, flow, slack_p, t_abs,
                 sto_p, e_block, w, c, with_box=True):
    N, L = network.n_bus, network.n_branch
    P = day.hours
    S = network.n_site
    slack, nonslack = _structure(network)
    A_s, A_r = network.A_s, network.A_r

    prog.add_equality(cp.multiply(_const_rows(network.x, P), flow),
                      (A_s - A_r) @ theta, label="dc-flow")
    gen_p_bus = np.zeros((N, P))
    for i in nonslack:
        gen_p_bus[network.gen_bus_idx[i], :] += day.p_gen[i, :]
    e_slack = np.zeros((N, 1))
    e_slack[slack, 0] = 1.0
    rhs = gen_p_bus - day.p_load + e_slack @ cp.reshape(slack_p, (1, P), order="C")
    if S:
        S_map = _scatter(N, network.site_bus_idx, S)
        rhs = rhs - S_map @ sto_p
    prog.add_equality((A_s - A_r).T @ flow, rhs, label="dc-balance")
    prog.add_equality(theta[slack, :], np.zeros(P), label="slack-ref")

    lim = _const_rows(network.i_max, P)
    prog.add_box(flow, -lim, lim, label="flow-box")
    sg = network.generators[network.slack_gen]
    if weights.relax_slack_p:
        p_lo, p_hi = -weights.slack_relax_bound, weights.slack_relax_bound
    else:
        p_lo, p_hi = sg.p_min, sg.p_max
    prog.add_box(slack_p, p_lo, p_hi, label="slack-p-box")
    prog.add_inequality(slack_p, t_abs, label="abs-epi")
    prog.add_inequality(-t_abs, slack_p, label="abs-epi")

    if S:
        rep_w = cp.reshape(w, (S, 1), order="C") @ np.ones((1, P))
        prog.add_box(sto_p, -rep_w, rep_w, label="conv-box")
        soe_min = np.array([s.soe_min for s in network.candidate_sites])
        soe_max = np.array([s.soe_max for s in network.candidate_sites])
        prog.add_equality(e_block[:, 1:], e_block[:, :-1] + weights.dt * sto_p,
                          label="soe-step")
        if with_box:
            ones = np.ones((1, P + 1))
            lo = cp.reshape(cp.multiply(soe_min, c), (S, 1), order="C") @ ones
            hi = cp.reshape(cp.multiply(soe_max, c), (S, 1), order="C") @ ones
            prog.add_box(e_block, lo, hi, label="soe-box")
        prog.add_equality(e_block[:, 0], e_block[:, P], label="soe-cycle")
        prog.add_equality(
            e_block[:, 0],
            cp.multiply(weights.init_soe_factor * (soe_max - soe_min), c),
            label="soe-init")
        prog.add_equality(cp.sum(sto_p, axis=0), np.zeros(P), label="fleet-neutral")


def build_dc_subproblem(network, day, weights, slacked_links=False):
    """Lossless angle-flow dispatch for one day, costing slack-bus power.

    With slacked_links the linking rows get priced slack variables and the
    slack-power cost is dropped, mirroring the cone feasibility twin.
    """
    P = check_day(network, day)
    S = network.n_site
    name = "day%d-dc" % day.day + ("-feas" if slacked_links else "")
    prog = ConicProgram(name=name)
    theta = prog.add_variable("theta", (network.n_bus, P))
    flow = prog.add_variable("flow", (network.n_branch, P))
    slack_p = prog.add_variable("slack_p", (P,))
    t_abs = prog.add_variable("t_abs", (P,))
    if S:
        sto_p = prog.add_variable("sto_p", (S, P))
        soe = prog.add_variable("soe", (S, P + 1))
        w = prog.add_variable("w", (S,))
        c = prog.add_variable("c", (S,))
    else:
        if slacked_links:
            raise ModelError("feasibility subproblem needs at least one candidate site")
        sto_p = soe = w = c = None

    _emit_dc_day(prog, network, weights, day, theta, flow, slack_p, t_abs,
                 sto_p, soe, w, c)
    if S:
        _, _, _, _, c_rate, _, _ = _site_arrays(network)
        prog.add_inequality(w, cp.multiply(c_rate, c), label="crate")
        w_hat = prog.add_parameter("w_hat", (S,))
        c_hat = prog.add_parameter("c_hat", (S,))
        if slacked_links:
            s_w = prog.add_variable("s_w", (S,))
            s_c = prog.add_variable("s_c", (S,))
            prog.add_equality(w, w_hat + s_w, tag="link_w", label="link-w")
            prog.add_equality(c, c_hat + s_c, tag="link_c", label="link-c")
            prog.add_inequality(np.zeros(S), s_w, label="slack-nonneg")
            prog.add_inequality(np.zeros(S), s_c, label="slack-nonneg")
            prog.add_objective(weights.w_slack * (cp.sum(s_w) + cp.sum(s_c)),
                               label="slack-cost")
            return prog
        prog.add_equality(w, w_hat, tag="link_w", label="link-w")
        prog.add_equality(c, c_hat, tag="link_c", label="link-c")
    prog.add_objective(weights.dc_weight * cp.sum(t_abs), label="slack-power-cost")
    return prog


def build_dc_centralized(network, days, weights):
    """Whole-horizon linear-flow program with relaxed siting variables."""
    if not days:
        raise ModelError("no days given")
    S = network.n_site
    if S == 0:
        raise ModelError("centralized program needs candidate sites")
    P = check_day(network, days[0])
    D = len(days)
    T = D * P
    prog = ConicProgram(name="monolith-dc")
    u = prog.add_variable("u", (S,), nonneg=True)
    w = prog.add_variable("w", (S,))
    c = prog.add_variable("c", (S,))
    soe = prog.add_variable("soe", (S, T + 1))

    w_min, w_max, c_min, c_max, c_rate, ic_p, ic_e = _site_arrays(network)
    cost_terms = []
    for k, day in enumerate(days):
        check_day(network, day)
        theta = prog.add_variable("theta_d%d" % k, (network.n_bus, P))
        flow = prog.add_variable("flow_d%d" % k, (network.n_branch, P))
        slack_p = prog.add_variable("slack_p_d%d" % k, (P,))
        t_abs = prog.add_variable("t_abs_d%d" % k, (P,))
        sto_p = prog.add_variable("sto_p_d%d" % k, (S, P))
        _emit_dc_day(prog, network, weights, day, theta, flow, slack_p, t_abs,
                     sto_p, soe[:, k * P:(k + 1) * P + 1], w, c, with_box=False)
        cost_terms.append(weights.dc_weight * cp.sum(t_abs))

    ones = np.ones((1, T + 1))
    soe_min = np.array([s.soe_min for s in network.candidate_sites])
    soe_max = np.array([s.soe_max for s in network.candidate_sites])
    prog.add_box(soe, cp.reshape(cp.multiply(soe_min, c), (S, 1), order="C") @ ones,
                 cp.reshape(cp.multiply(soe_max, c), (S, 1), order="C") @ ones,
                 label="soe-box")
    prog.add_box(w, cp.multiply(w_min, u), cp.multiply(w_max, u), label="site-w")
    prog.add_box(c, cp.multiply(c_min, u), cp.multiply(c_max, u), label="site-c")
    prog.add_inequality(w, cp.multiply(c_rate, c), label="crate")
    prog.add_inequality(u, np.ones(S), label="site-on")
    capex = ic_p @ w + ic_e @ c
    prog.add_objective(weights.capex_scale * capex + cp.sum(cp.hstack(cost_terms)),
                       label="total-cost")
    return prog


# ---------------------------------------------------------------------------
# solution extraction

@dataclass
class OperatingPoint:
    V: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    theta_l: np.ndarray
    p_send: np.ndarray
    q_send: np.ndarray
    p_loss: np.ndarray
    q_loss: np.ndarray
    k_loss: np.ndarray
    slack_p: np.ndarray
    slack_q: np.ndarray
    gen_q: np.ndarray
    sto_p: np.ndarray
    sto_q: np.ndarray
    soe: np.ndarray
    w: np.ndarray
    c: np.ndarray
    opex: float


def point_from_record(network, record, suffix="", S=None):
    """Pull one day block out of a solved program's values."""
    if not record.values:
        raise ModelError("no values on a %s record" % record.status)
    v = record.values
    S = network.n_site if S is None else S

    def get(name, default_shape=None):
        key = name + suffix
        if key in v:
            return v[key]
        if name in v:
            return v[name]
        if default_shape is None:
            raise ModelError("record has no %r block" % key)
        return np.zeros(default_shape)

    P = get("V").shape[1]
    G = max(network.n_gen - 1, 0)
    return OperatingPoint(
        V=get("V"), theta=get("theta"), p=get("p"), q=get("q"),
        theta_l=get("theta_l"), p_send=get("p_send"), q_send=get("q_send"),
        p_loss=get("p_loss"), q_loss=get("q_loss"), k_loss=get("k_loss"),
        slack_p=get("slack_p"), slack_q=get("slack_q"),
        gen_q=get("gen_q", (G, P)),
        sto_p=get("sto_p", (S, P)), sto_q=get("sto_q", (S, P)),
        soe=get("soe", (S, P + 1)),
        w=get("w", (S,)), c=get("c", (S,)),
        opex=float(record.objective),
    )


def injections_with_storage(network, day, point):
    """Per-hour net injections for the exact power-flow stage.

    Non-slack machine active dispatch and the storage setpoints are fixed at
    the optimizer's values; machine reactive output stays free (it is
    resolved by the magnitude setpoints), so only load and storage enter the
    fixed reactive side.
    """
    N = network.n_bus
    P = day.hours
    slack, nonslack = _structure(network)
    p_inj = -day.p_load.copy()
    q_fix = -day.q_load.copy()
    for i in nonslack:
        p_inj[network.gen_bus_idx[i], :] += day.p_gen[i, :]
    if network.n_site:
        S_map = _scatter(N, network.site_bus_idx, network.n_site)
        p_inj -= S_map @ point.sto_p
        q_fix -= S_map @ point.sto_q
    return p_inj, q_fix


@dataclass
class Cut:
    day: int
    iteration: int
    kind: str               # "optimality" or "feasibility"
    value: float            # subproblem objective at the anchor
    coef_w: np.ndarray
    coef_c: np.ndarray
    anchor_w: np.ndarray
    anchor_c: np.ndarray

    def rhs_at(self, w, c):
        return float(self.value + self.coef_w @ (np.asarray(w) - self.anchor_w)
                     + self.coef_c @ (np.asarray(c) - self.anchor_c))


def extract_optimality_cut(day, iteration, record, w_hat, c_hat):
    """Affine under-estimator of the day's cost around the trial rating."""
    if record.status != "optimal":
        raise ModelError("cannot cut from a %s record" % record.status)
    lam = record.duals.get("link_w")
    mu = record.duals.get("link_c")
    if lam is None or mu is None:
        raise ModelError("linking duals missing from the record")
    return Cut(day=day, iteration=iteration, kind="optimality",
               value=float(record.objective), coef_w=lam, coef_c=mu,
               anchor_w=np.array(w_hat, dtype=float),
               anchor_c=np.array(c_hat, dtype=float))


def extract_feasibility_cut(day, iteration, record, w_hat, c_hat, tol=1e-9):
    """Separating inequality from a positive infeasibility measure."""
    if record.status != "optimal":
        raise ModelError("cannot cut from a %s record" % record.status)
    if record.objective <= tol:
        raise ModelError(
            "day %d: infeasibility measure is %.3e, the trial rating was feasible"
            % (day, record.objective))
    nu = record.duals.get("link_w")
    xi = record.duals.get("link_c")
    if nu is None or xi is None:
        raise ModelError("linking duals missing from the record")
    return Cut(day=day, iteration=iteration, kind="feasibility",
               value=float(record.objective), coef_w=nu, coef_c=xi,
               anchor_w=np.array(w_hat, dtype=float),
               anchor_c=np.array(c_hat, dtype=float))


def body_manifest(prog):
    """Structural manifest with linking and slack rows stripped.

    Two programs sharing this manifest have identical constraint bodies, so
    a subproblem and its feasibility twin can be diffed structurally.
    """
    skip_labels = {"link-w", "link-c", "slack-nonneg"}
    return {k: r for k, r in prog.manifest().items() if k[0] not in skip_labels}
