"""Newton-Raphson AC power flow in polar form, with reactive-limit switching.

Also evaluates how far a relaxed dispatch point sits from the nonlinear
power-flow manifold (nodal residuals, branch angle identity, cycle sums,
cone gaps) and runs the per-hour refinement that recovers an AC-feasible
trajectory from a relaxed one.
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class ACPFError(RuntimeError):
    pass


def make_ybus(network):
    n = network.n_bus
    y_series = 1.0 / (network.r + 1j * network.x)
    f, t = network.from_idx, network.to_idx
    rows = np.concatenate([f, t, f, t])
    cols = np.concatenate([f, t, t, f])
    data = np.concatenate([y_series, y_series, -y_series, -y_series])
    Y = sp.csr_matrix((data, (rows, cols)), shape=(n, n), dtype=complex)
    Y += sp.diags(network.g_shunt + 1j * network.b_shunt)
    return Y.tocsr()


def power_mismatch(Y, vm, va, p_spec, q_spec, pvpq, pq):
    """Stacked active/reactive mismatch [P_calc-P_spec; Q_calc-Q_spec]."""
    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    return np.concatenate([(S.real - p_spec)[pvpq], (S.imag - q_spec)[pq]])


def newton_jacobian(Y, vm, va, pvpq, pq):
    """Polar Jacobian of the mismatch vector w.r.t. [va_pvpq, vm_pq]."""
    V = vm * np.exp(1j * va)
    Ibus = Y @ V
    diagV = sp.diags(V)
    diagI = sp.diags(Ibus)
    diagVnorm = sp.diags(V / vm)
    dS_dVm = diagV @ np.conj(Y @ diagVnorm) + np.conj(diagI) @ diagVnorm
    dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
    J11 = dS_dVa[np.ix_(pvpq, pvpq)].real
    J12 = dS_dVm[np.ix_(pvpq, pq)].real
    J21 = dS_dVa[np.ix_(pq, pvpq)].imag
    J22 = dS_dVm[np.ix_(pq, pq)].imag
    return sp.bmat([[J11, J12], [J21, J22]], format="csc")


@dataclass
class ACPFState:
    vm: np.ndarray
    va: np.ndarray
    p_calc: np.ndarray          # realized net injections
    q_calc: np.ndarray
    gen_q_bus: np.ndarray       # generator reactive output per bus
    slack_p: float
    slack_q: float
    converged: bool
    iterations: int
    mismatch: float
    switched: tuple = ()        # buses moved to the PQ set at a reactive limit


def _bus_sets(network):
    slack = network.slack_bus
    pv = [i for i, b in enumerate(network.buses) if b.kind == "pv"]
    pq = [i for i, b in enumerate(network.buses) if b.kind == "pq"]
    if sorted([slack] + pv + pq) != list(range(network.n_bus)):
        raise ACPFError("bus kinds must partition the bus set")
    return slack, np.array(pv, dtype=int), np.array(pq, dtype=int)


def _gen_bus_data(network):
    """Per-bus voltage setpoint and aggregate reactive range of hosted machines."""
    n = network.n_bus
    v_set = np.ones(n)
    q_min = np.zeros(n)
    q_max = np.zeros(n)
    has_gen = np.zeros(n, dtype=bool)
    for g, bus in zip(network.generators, network.gen_bus_idx):
        if not has_gen[bus]:
            v_set[bus] = g.v_set
        has_gen[bus] = True
        q_min[bus] += g.q_min
        q_max[bus] += g.q_max
    return v_set, q_min, q_max, has_gen


def solve_acpf(network, p_inj, q_fixed, init=None, enforce_q_limits=True,
               vm_setpoints=None, tol=1e-8, max_iter=30, max_rounds=10):
    """Newton power flow.

    p_inj: net active injection per bus excluding the slack machine's output;
    q_fixed: net reactive injection per bus excluding slack/PV machine output.
    PV buses hold their setpoint magnitude until a reactive limit binds, then
    move to the PQ set at that limit (never back within one call). init is a
    (vm, va) warm start; default is a flat start at the setpoints.
    """
    slack, pv, pq = _bus_sets(network)
    v_set, q_min_bus, q_max_bus, has_gen = _gen_bus_data(network)
    for bus in np.concatenate([[slack], pv]).astype(int):
        if not has_gen[bus]:
            raise ACPFError("bus %s is %s but hosts no generator"
                            % (network.buses[bus].id, network.buses[bus].kind))
    if vm_setpoints is not None:
        v_set = np.asarray(vm_setpoints, dtype=float)

    n = network.n_bus
    Y = make_ybus(network)
    if init is None:
        vm = np.ones(n)
        vm[pv] = v_set[pv]
        vm[slack] = v_set[slack]
        va = np.zeros(n)
    else:
        vm, va = np.array(init[0], dtype=float), np.array(init[1], dtype=float)
    va = va - va[slack]   # slack is the angle reference

    p_spec = np.asarray(p_inj, dtype=float).copy()
    q_spec = np.asarray(q_fixed, dtype=float).copy()   # PV rows unused until switched
    pv_active = list(pv)
    switched = []
    total_iters = 0

    for round_ in range(max_rounds):
        pvpq = np.array(sorted(pv_active + list(pq)), dtype=int)
        pq_now = np.array(sorted(set(range(n)) - {slack} - set(pv_active)), dtype=int)
        vm[pv_active] = v_set[pv_active]
        vm[slack] = v_set[slack]
        converged = False
        for it in range(max_iter):
            F = power_mismatch(Y, vm, va, p_spec, q_spec, pvpq, pq_now)
            if F.size == 0 or np.max(np.abs(F)) <= tol:
                converged = True
                break
            J = newton_jacobian(Y, vm, va, pvpq, pq_now)
            try:
                dx = spla.spsolve(J, F)
            except RuntimeError as exc:
                cond = np.linalg.cond(J.toarray()) if J.shape[0] <= 500 else float("inf")
                raise ACPFError("singular Jacobian (cond ~ %.2e): %s" % (cond, exc))
            if not np.all(np.isfinite(dx)):
                cond = np.linalg.cond(J.toarray()) if J.shape[0] <= 500 else float("inf")
                raise ACPFError("singular Jacobian (cond ~ %.2e)" % cond)
            total_iters += 1
            va[pvpq] -= dx[:len(pvpq)]
            vm[pq_now] -= dx[len(pvpq):]

        if not converged:
            break
        if not enforce_q_limits or not pv_active:
            break
        # reactive output needed to hold the remaining PV setpoints
        V = vm * np.exp(1j * va)
        S = V * np.conj(Y @ V)
        violating = []
        for bus in list(pv_active):
            q_gen = S.imag[bus] - q_fixed[bus]
            if q_gen > q_max_bus[bus] + 1e-9:
                q_spec[bus] = q_fixed[bus] + q_max_bus[bus]
                violating.append(bus)
            elif q_gen < q_min_bus[bus] - 1e-9:
                q_spec[bus] = q_fixed[bus] + q_min_bus[bus]
                violating.append(bus)
        if not violating:
            break
        for bus in violating:
            pv_active.remove(bus)
            switched.append(bus)

    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    F = power_mismatch(Y, vm, va, p_spec, q_spec,
                       np.array(sorted(pv_active + list(pq)), dtype=int),
                       np.array(sorted(set(range(n)) - {slack} - set(pv_active)), dtype=int))
    gen_q_bus = np.zeros(n)
    report_buses = set(pv) | {slack} | set(switched)
    for bus in report_buses:
        gen_q_bus[bus] = S.imag[bus] - q_fixed[bus]
    return ACPFState(
        vm=vm, va=va, p_calc=S.real, q_calc=S.imag, gen_q_bus=gen_q_bus,
        slack_p=float(S.real[slack] - p_inj[slack]),
        slack_q=float(S.imag[slack] - q_fixed[slack]),
        converged=bool(converged),
        iterations=total_iters,
        mismatch=float(np.max(np.abs(F))) if F.size else 0.0,
        switched=tuple(switched),
    )


# ---------------------------------------------------------------------------
# residuals of a relaxed operating point against the nonlinear equations

@dataclass
class ResidualReport:
    nodal_p: np.ndarray        # (N, P)
    nodal_q: np.ndarray
    branch_angle: np.ndarray   # (L, P)  v_s v_r sin(theta_l) - (X p_s - R q_s)
    cycle_sums: np.ndarray     # (n_cycles, P), wrapped to (-pi, pi]
    cone_gap: np.ndarray       # (L, P)  q_loss - X (p_s^2 + q_s^2) / V_s

    def max_nodal(self):
        if self.nodal_p.size == 0:
            return 0.0
        return float(max(np.max(np.abs(self.nodal_p)), np.max(np.abs(self.nodal_q))))

    def summary(self):
        out = {}
        for name in ("nodal_p", "nodal_q", "branch_angle", "cycle_sums", "cone_gap"):
            arr = np.abs(getattr(self, name)).ravel()
            if arr.size == 0:
                out[name] = dict(min=0.0, median=0.0, max=0.0, q95=0.0)
            else:
                out[name] = dict(min=float(arr.min()), median=float(np.median(arr)),
                                 max=float(arr.max()), q95=float(np.quantile(arr, 0.95)))
        return out


def evaluate_residuals(network, point, cycles):
    """Substitute a relaxed operating point into the nonlinear equations.

    point carries squared voltage magnitudes V (N,P), nodal angles theta,
    branch angle differences theta_l, sending-end flows and losses, and net
    injections p, q, all per hour.
    """
    V = np.atleast_2d(point.V)
    if np.any(V <= 0.0):
        raise ACPFError("nonpositive squared voltage magnitude in operating point")
    vm = np.sqrt(V)
    va = np.atleast_2d(point.theta)
    Y = make_ybus(network)
    Vc = vm * np.exp(1j * va)
    S = Vc * np.conj(Y @ Vc)
    nodal_p = np.atleast_2d(point.p) - S.real
    nodal_q = np.atleast_2d(point.q) - S.imag

    f, t = network.from_idx, network.to_idx
    th_l = np.atleast_2d(point.theta_l)
    p_s = np.atleast_2d(point.p_send)
    q_s = np.atleast_2d(point.q_send)
    q_o = np.atleast_2d(point.q_loss)
    X = network.x[:, None]
    R = network.r[:, None]
    branch_angle = vm[f, :] * vm[t, :] * np.sin(th_l) - (X * p_s - R * q_s)
    cone_gap = q_o - X * (p_s ** 2 + q_s ** 2) / V[f, :]

    P = V.shape[1]
    sums = np.zeros((len(cycles.cycles), P))
    for i, cycle in enumerate(cycles.cycles):
        for k, sign in cycle:
            sums[i, :] += sign * th_l[k, :]
    cycle_sums = np.mod(sums + np.pi, 2.0 * np.pi) - np.pi
    return ResidualReport(nodal_p, nodal_q, branch_angle, cycle_sums, cone_gap)


def acpf_state_to_point(network, state, p_inj, q_fixed):
    """Repackage an exact power-flow solution in operating-point layout."""
    from types import SimpleNamespace
    f, t = network.from_idx, network.to_idx
    vm, va = state.vm, state.va
    Vf = (vm * np.exp(1j * va))[f]
    Vt = (vm * np.exp(1j * va))[t]
    y = 1.0 / (network.r + 1j * network.x)
    I = (Vf - Vt) * y
    S_f = Vf * np.conj(I)
    i2 = np.abs(I) ** 2
    return SimpleNamespace(
        V=(vm ** 2)[:, None],
        theta=va[:, None],
        theta_l=(va[f] - va[t])[:, None],
        p_send=S_f.real[:, None],
        q_send=S_f.imag[:, None],
        p_loss=(network.r * i2)[:, None],
        q_loss=(network.x * i2)[:, None],
        p=state.p_calc[:, None],
        q=state.q_calc[:, None],
    )


# ---------------------------------------------------------------------------
# per-hour refinement of a relaxed trajectory

@dataclass
class RefinementResult:
    states: list
    hour_seconds: np.ndarray
    failed_hours: tuple
    q_loss: np.ndarray          # (L, P) refined branch reactive losses
    p_loss: np.ndarray

    @property
    def converged(self):
        return len(self.failed_hours) == 0


def recover_feasible(network, relaxed, p_inj, q_fixed):
    """Solve one exact power flow per hour, warm-started at the relaxed point.

    Storage enters p_inj/q_fixed as fixed injections; PV magnitudes are held
    at the relaxed solution's voltages so the refined point stays close to
    the dispatch the optimizer chose. Falls back to a flat start whenever the
    warm start fails to converge; hours failing both are reported, the run
    still completes.
    """
    V = np.atleast_2d(relaxed.V)
    theta = np.atleast_2d(relaxed.theta)
    P = V.shape[1]
    vm_relaxed = np.sqrt(V)
    f, t = network.from_idx, network.to_idx
    y = 1.0 / (network.r + 1j * network.x)

    states, seconds, failed = [], np.zeros(P), []
    q_loss = np.zeros((network.n_branch, P))
    p_loss = np.zeros((network.n_branch, P))
    for h in range(P):
        t0 = time.perf_counter()
        state = solve_acpf(network, p_inj[:, h], q_fixed[:, h],
                           init=(vm_relaxed[:, h], theta[:, h]),
                           vm_setpoints=vm_relaxed[:, h])
        if not state.converged:
            state = solve_acpf(network, p_inj[:, h], q_fixed[:, h], init=None,
                               vm_setpoints=vm_relaxed[:, h])
        seconds[h] = time.perf_counter() - t0
        states.append(state)
        if not state.converged:
            failed.append(h)
            continue
        Vc = state.vm * np.exp(1j * state.va)
        I = (Vc[f] - Vc[t]) * y
        i2 = np.abs(I) ** 2
        q_loss[:, h] = network.x * i2
        p_loss[:, h] = network.r * i2
    return RefinementResult(states, seconds, tuple(failed), q_loss, p_loss)
