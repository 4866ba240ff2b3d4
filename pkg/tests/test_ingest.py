"""Case files, time-series loading, reactive reconstruction, boundary setup."""
import math

import numpy as np
import pytest

from bessplan.acpf import solve_acpf
from bessplan.caseio import (CaseError, read_case, read_matrix_case,
                             write_case)
from bessplan.ingest import (BoundaryConditionSpec, IngestError,
                             TimeSeriesData, baseline_states,
                             branch_current_magnitudes,
                             generate_boundary_conditions, load_timeseries,
                             reconstruct_reactive, synth_timeseries, to_days)
from bessplan.network import Branch, Bus, Generator, NetworkModel

from fixtures import six_bus, two_bus


def _write(path, text):
    path.write_text(text)
    return str(path)


def _star_net(v_min=0.81):
    """Slack hub feeding three load spokes."""
    return NetworkModel(
        buses=[Bus("b0", kind="slack"),
               Bus("b1", v_min=v_min), Bus("b2", v_min=v_min),
               Bus("b3", v_min=v_min)],
        branches=[Branch("l1", "b0", "b1", r=0.01, x=0.05),
                  Branch("l2", "b0", "b2", r=0.01, x=0.05),
                  Branch("l3", "b0", "b3", r=0.01, x=0.05)],
        generators=[Generator("g0", "b0", p_min=-5, p_max=5,
                              q_min=-5, q_max=5, v_set=1.0)],
    )


# -- case files ---------------------------------------------------------------


def test_case_file_roundtrip(tmp_path):
    net = six_bus()
    path = tmp_path / "grid.case"
    write_case(net, path)
    back = read_case(str(path))
    assert back.base_mva == net.base_mva
    assert [b.id for b in back.buses] == [b.id for b in net.buses]
    assert [b.kind for b in back.buses] == [b.kind for b in net.buses]
    for name in ("r", "x", "i_max", "theta_max", "v_min", "v_max",
                 "g_shunt", "b_shunt"):
        np.testing.assert_allclose(getattr(back, name), getattr(net, name),
                                   rtol=1e-12, atol=0)
    for mine, theirs in zip(back.generators, net.generators):
        assert mine.id == theirs.id and mine.bus == theirs.bus
        assert math.isclose(mine.p_max, theirs.p_max, rel_tol=1e-12)
        assert math.isclose(mine.q_min, theirs.q_min, rel_tol=1e-12)
        assert mine.is_condenser == theirs.is_condenser
    for mine, theirs in zip(back.candidate_sites, net.candidate_sites):
        assert mine.id == theirs.id and mine.bus == theirs.bus
        for field in ("w_min", "w_max", "c_min", "c_max", "c_rate",
                      "ic_p", "ic_e", "soe_min", "soe_max"):
            assert math.isclose(getattr(mine, field), getattr(theirs, field),
                                rel_tol=1e-12, abs_tol=1e-15)


def test_case_file_errors(tmp_path):
    head = "[case]\n100\n[bus]\n1 slack 0 0 90 110 100\n"
    with pytest.raises(CaseError, match="line 1: unknown section"):
        read_case(_write(tmp_path / "a.case", "[loads]\n"))
    with pytest.raises(CaseError, match="line 1: data before any section"):
        read_case(_write(tmp_path / "b.case", "1 2 3\n"))
    with pytest.raises(CaseError, match=r"line 4: \[bus\] row needs 7"):
        read_case(_write(tmp_path / "c.case", "[case]\n100\n[bus]\n1 slack 0\n"))
    with pytest.raises(CaseError, match="line 6: non-numeric value 'fast'"):
        read_case(_write(tmp_path / "d.case",
                         head + "[branch]\n1 1 1 0.1 fast 0.5 1\n"))
    with pytest.raises(CaseError, match="exactly one .case. row"):
        read_case(_write(tmp_path / "e.case", "[bus]\n1 slack 0 0 90 110 100\n"))
    with pytest.raises(CaseError, match="bus kind must be one of"):
        read_case(_write(tmp_path / "f.case",
                         "[case]\n100\n[bus]\n1 hub 0 0 90 110 100\n"))
    # structural validation failures carry the file name
    bad = (head + "2 pq 0 0 90 110 100\n"
           "[branch]\n1 1 9 1 1 0.5 1\n[generator]\n1 1 0 0 0 0 1.0 0\n")
    with pytest.raises(CaseError, match="g.case.*dangling"):
        read_case(_write(tmp_path / "g.case", bad))


_MATRIX_CASE = """
function mpc = case3
mpc.version = '2';
mpc.baseMVA = 100;
%% bus_i type Pd Qd Gs Bs area Vm Va baseKV zone Vmax Vmin
mpc.bus = [
 1 3  0.0  0.0 0 0   1 1.0 0 132 1 1.06 0.94;
 2 2 20.0  8.0 0 2.5 1 1.0 0 132 1 1.06 0.94;
 3 1 45.0 15.0 0 0   1 1.0 0 132 1 1.06 0.94;
];
%% fbus tbus r x b rateA rateB rateC ratio angle status angmin angmax
mpc.branch = [
 1 2 0.01 0.05 0  50 0 0 0 0 1 -30 30;
 1 3 0.02 0.08 0   0 0 0 0 0 1 -360 360;
 2 3 0.02 0.08 0  40 0 0 0 0 1 -30 30;
 1 3 0.02 0.08 0  40 0 0 0 0 0 -30 30;
];
%% bus Pg Qg Qmax Qmin Vg mBase status Pmax Pmin
mpc.gen = [
 1 0 0 150 -150 1.02 100 1 250 -250;
 2 0 0  60  -60 1.01 100 1  80    0;
 2 0 0  10  -10 1.01 100 0  10    0;
 3 0 0  30  -30 1.00 100 1   0    0;
];
"""


def test_matrix_case_conversion(tmp_path):
    path = _write(tmp_path / "case3.m", _MATRIX_CASE)
    net, p_snap, q_snap = read_matrix_case(path)
    assert net.base_mva == 100
    assert [b.kind for b in net.buses] == ["slack", "pv", "pq"]
    assert net.buses[1].b_shunt == 2.5 / 100
    assert net.buses[0].v_max == pytest.approx(1.06 ** 2)
    np.testing.assert_allclose(p_snap, [0.0, 0.20, 0.45])
    np.testing.assert_allclose(q_snap, [0.0, 0.08, 0.15])

    assert net.n_branch == 3                      # the out-of-service row drops
    np.testing.assert_allclose(net.r, [0.01, 0.02, 0.02])
    assert net.i_max[0] == pytest.approx(0.50)    # 50 MVA on a 100 MVA base
    assert net.i_max[1] == pytest.approx(10.0)    # unlimited keeps the default
    assert net.theta_max[0] == pytest.approx(math.radians(30))
    assert net.theta_max[1] == pytest.approx(math.pi / 3)

    assert net.n_gen == 3                         # the status-0 machine drops
    g1, g2, g3 = net.generators
    assert (g1.p_min, g1.p_max) == (-2.5, 2.5)
    assert g1.v_set == pytest.approx(1.02)
    assert not g1.is_condenser and not g2.is_condenser
    assert g3.is_condenser and g3.p_max == 0.0
    assert g3.q_max == pytest.approx(0.30)


def test_matrix_case_errors(tmp_path):
    with pytest.raises(CaseError, match="missing mpc.baseMVA"):
        read_matrix_case(_write(tmp_path / "x.m", "mpc.bus = [];"))
    bad_type = _MATRIX_CASE.replace(" 1 3  0.0", " 1 4  0.0")
    with pytest.raises(CaseError, match="unsupported type 4"):
        read_matrix_case(_write(tmp_path / "y.m", bad_type))
    with pytest.raises(CaseError, match="missing mpc.gen"):
        read_matrix_case(_write(
            tmp_path / "z.m",
            "mpc.baseMVA = 100;\nmpc.bus = [1 3 0 0 0 0 1 1 0 1 1 1.1 0.9;];"
            "\nmpc.branch = [];"))


# -- time series --------------------------------------------------------------


def test_load_timeseries_aligns_columns(tmp_path):
    net, _, _ = two_bus()
    rows = ["b2,b1"] + ["%d,%d" % (10 * t + 2, 10 * t + 1) for t in range(48)]
    ts = load_timeseries(_write(tmp_path / "load.csv", "\n".join(rows)), net)
    assert ts.horizon == 48 and ts.n_days == 2 and ts.day_hours == 24
    # realigned to network bus order despite the swapped file order
    assert ts.load_p[0].tolist() == [1.0, 2.0]
    assert ts.load_p[47].tolist() == [471.0, 472.0]
    assert not ts.load_q.any() and not ts.fixed_gen_p.any()


def test_load_timeseries_rejections(tmp_path):
    net, _, _ = two_bus()

    def attempt(name, text, pattern):
        with pytest.raises(IngestError, match=pattern):
            load_timeseries(_write(tmp_path / name, text), net)

    attempt("nan.csv", "b1,b2\n1,2\n1,nan\n", r"line 3: non-finite.*column b2")
    attempt("word.csv", "b1,b2\n1,2\nx,2\n", r"line 3: non-numeric value 'x' in column b1")
    attempt("missing.csv", "b1\n1\n", "missing bus column.s. b2")
    attempt("unknown.csv", "b1,b2,b9\n1,2,3\n", "unknown bus column.s. b9")
    attempt("dupe.csv", "b1,b1\n1,2\n", "duplicate column")
    attempt("ragged.csv", "b1,b2\n1\n", "line 2: expected 2 columns, got 1")
    attempt("empty.csv", "", "empty file")
    attempt("head.csv", "b1,b2\n", "no data rows")
    short = "b1,b2\n" + "\n".join("1,2" for _ in range(36))
    attempt("short.csv", short, "36 hours does not divide into 24-hour days")


def test_load_timeseries_all_zero_is_valid(tmp_path):
    net, _, _ = two_bus()
    text = "b1,b2\n" + "\n".join("0,0" for _ in range(24))
    ts = load_timeseries(_write(tmp_path / "zero.csv", text), net)
    assert ts.horizon == 24 and not ts.load_p.any()


def test_generator_series(tmp_path):
    net = six_bus()
    load = "\n".join([",".join(b.id for b in net.buses)]
                     + ["0.1,0.1,0.1,0.1,0.1,0.1"] * 24)
    load_path = _write(tmp_path / "load.csv", load)
    gen = "g2\n" + "\n".join("%g" % (0.01 * t) for t in range(24))
    ts = load_timeseries(load_path, net,
                         gen_path=_write(tmp_path / "gen.csv", gen))
    assert ts.fixed_gen_p.shape == (24, net.n_gen)
    assert ts.fixed_gen_p[:, 0].tolist() == [0.0] * 24
    assert ts.fixed_gen_p[10, 1] == pytest.approx(0.10)

    with pytest.raises(IngestError, match="slack machine g1.*not an input"):
        load_timeseries(load_path, net,
                        gen_path=_write(tmp_path / "slack.csv",
                                        "g1\n" + "1\n" * 24))
    with pytest.raises(IngestError, match="unknown generator column g9"):
        load_timeseries(load_path, net,
                        gen_path=_write(tmp_path / "odd.csv",
                                        "g9\n" + "1\n" * 24))
    with pytest.raises(IngestError, match="12 hours, loads have 24"):
        load_timeseries(load_path, net,
                        gen_path=_write(tmp_path / "short.csv",
                                        "g2\n" + "1\n" * 12))


def _ts(net, load_p, day_hours=2):
    load_p = np.asarray(load_p, dtype=float)
    return TimeSeriesData(load_p=load_p, load_q=np.zeros_like(load_p),
                          fixed_gen_p=np.zeros((load_p.shape[0], net.n_gen)),
                          day_hours=day_hours)


def test_reconstruct_reactive_ratio_scaling():
    net = _star_net()
    load = np.zeros((2, 4))
    load[:, 1] = 8.0          # snapshot pf 4/5 at b1
    load[:, 2] = 3.0          # unity pf at b2
    ts = reconstruct_reactive(_ts(net, load), net,
                              snapshot_p=np.array([0.0, 4.0, 2.0, 1.0]),
                              snapshot_q=np.array([0.0, 3.0, 0.0, 0.5]))
    assert ts.load_q[:, 1].tolist() == [6.0, 6.0]
    assert ts.load_q[:, 2].tolist() == [0.0, 0.0]


def test_reconstruct_reactive_donor_rule():
    net = _star_net()
    pf = {1: 0.90, 2: 0.94, 3: 0.99}
    snap_p = np.array([0.95, 1.0, 1.0, 1.0])
    snap_q = np.array([math.sqrt(1 - 0.95 ** 2)]
                      + [math.tan(math.acos(pf[n])) for n in (1, 2, 3)])
    load = np.ones((2, 4))
    ts = reconstruct_reactive(_ts(net, load), net, snap_p, snap_q)
    # brute-force the donor: the load-only bus with the closest power factor
    donor = min(pf, key=lambda n: abs(pf[n] - 0.95))
    assert donor == 2
    expected = snap_q[donor] / snap_p[donor]
    np.testing.assert_allclose(ts.load_q[:, 0], expected, rtol=1e-12)


def test_reconstruct_reactive_is_homogeneous():
    net = _star_net()
    rng = np.random.default_rng(5)
    load = rng.uniform(0.0, 2.0, size=(6, 4))
    snap_p = np.array([1.0, 2.0, 1.5, 0.7])
    snap_q = np.array([0.3, 0.9, -0.4, 0.2])
    base = reconstruct_reactive(_ts(net, load, 3), net, snap_p, snap_q)
    scaled = reconstruct_reactive(_ts(net, 3.7 * load, 3), net, snap_p, snap_q)
    np.testing.assert_allclose(scaled.load_q, 3.7 * base.load_q, rtol=1e-12)


def test_reconstruct_reactive_rejects_undefined_pf():
    net = _star_net()
    with pytest.raises(IngestError, match="bus b2.*power factor undefined"):
        reconstruct_reactive(_ts(net, np.ones((2, 4))), net,
                             snapshot_p=np.array([1.0, 1.0, 0.0, 1.0]),
                             snapshot_q=np.array([0.0, 0.3, 0.2, 0.1]))


def test_synth_series_is_seeded():
    net = six_bus()
    a = synth_timeseries(net, n_days=2, day_hours=12, seed=9)
    b = synth_timeseries(net, n_days=2, day_hours=12, seed=9)
    c = synth_timeseries(net, n_days=2, day_hours=12, seed=10)
    assert a.horizon == 24 and a.load_p.shape == (24, 6)
    assert np.array_equal(a.load_p, b.load_p)
    assert not np.array_equal(a.load_p, c.load_p)
    assert np.all(a.load_p >= 0)
    np.testing.assert_allclose(a.load_q, 0.35 * a.load_p)
    gen_buses = set(net.gen_bus_idx.tolist())
    for n in gen_buses:
        assert not a.load_p[:, n].any()


def test_to_days_slices_and_transposes():
    net = six_bus()
    ts = synth_timeseries(net, n_days=3, day_hours=8, seed=1)
    days = to_days(ts, net)
    assert [d.day for d in days] == [0, 1, 2]
    assert days[1].p_load.shape == (6, 8)
    assert days[1].p_gen.shape == (net.n_gen, 8)
    np.testing.assert_array_equal(days[1].p_load, ts.load_p[8:16].T)
    np.testing.assert_array_equal(days[2].q_load, ts.load_q[16:24].T)
    with pytest.raises(IngestError, match="does not match the 4-bus"):
        to_days(ts, _star_net())


def test_timeseries_validation():
    with pytest.raises(IngestError, match="non-finite"):
        TimeSeriesData(np.full((2, 2), np.nan), np.zeros((2, 2)),
                       np.zeros((2, 1)), day_hours=2)
    with pytest.raises(IngestError, match="shapes differ"):
        TimeSeriesData(np.zeros((2, 2)), np.zeros((2, 3)),
                       np.zeros((2, 1)), day_hours=2)
    with pytest.raises(IngestError, match="does not divide"):
        TimeSeriesData(np.zeros((5, 2)), np.zeros((5, 2)),
                       np.zeros((5, 1)), day_hours=2)


# -- boundary conditions ------------------------------------------------------


def _history(net, hours=6, scale=1.0):
    t = np.arange(hours)
    shape = scale * (0.6 + 0.4 * np.sin(math.pi * t / (hours - 1)))
    load_p = np.zeros((hours, net.n_bus))
    load_q = np.zeros((hours, net.n_bus))
    gen_buses = set(net.gen_bus_idx.tolist())
    for n in range(net.n_bus):
        if n not in gen_buses:
            load_p[:, n] = shape * (0.3 + 0.1 * n)
            load_q[:, n] = 0.3 * load_p[:, n]
    return TimeSeriesData(load_p=load_p, load_q=load_q,
                          fixed_gen_p=np.zeros((hours, net.n_gen)),
                          day_hours=hours)


def _hand_currents(net, ts):
    peaks = np.zeros(net.n_branch)
    for t in range(ts.horizon):
        gen_p = np.zeros(net.n_bus)
        state = solve_acpf(net, gen_p - ts.load_p[t], -ts.load_q[t])
        assert state.converged
        V = state.vm * np.exp(1j * state.va)
        for k in range(net.n_branch):
            z = net.r[k] + 1j * net.x[k]
            i = abs((V[net.from_idx[k]] - V[net.to_idx[k]]) / z)
            peaks[k] = max(peaks[k], i)
    return peaks


def test_factor_one_matches_history_and_stays_feasible():
    net = six_bus()
    ts = _history(net)
    spec = BoundaryConditionSpec(tighten_factor=1.0,
                                 branches_to_tighten=tuple(
                                     l.id for l in net.branches))
    out = generate_boundary_conditions(net, ts, spec)
    np.testing.assert_allclose(out.i_max, _hand_currents(net, ts), rtol=1e-12)
    # the tightened network still carries the whole history
    for state in baseline_states(out, ts):
        flows = branch_current_magnitudes(out, state.vm, state.va)
        assert np.all(flows <= out.i_max * (1 + 1e-9))


def test_default_factor_is_082_of_peak():
    net = six_bus()
    ts = _history(net)
    spec = BoundaryConditionSpec(branches_to_tighten=("l23",))
    assert spec.tighten_factor == 0.82
    out = generate_boundary_conditions(net, ts, spec)
    k = [l.id for l in net.branches].index("l23")
    assert out.i_max[k] == pytest.approx(0.82 * _hand_currents(net, ts)[k],
                                         rel=1e-12)
    untouched = [j for j in range(net.n_branch) if j != k]
    np.testing.assert_array_equal(out.i_max[untouched], net.i_max[untouched])


def test_boundary_spec_validation():
    with pytest.raises(IngestError, match=r"tighten factor must lie in \(0, 1\]"):
        BoundaryConditionSpec(tighten_factor=0.0)
    with pytest.raises(IngestError, match="tighten factor"):
        BoundaryConditionSpec(tighten_factor=1.2)
    with pytest.raises(IngestError, match="unknown candidate site rule"):
        BoundaryConditionSpec(candidate_site_rule="everywhere")


def test_boundary_rejects_unknown_and_idle_branches():
    net = six_bus()
    ts = _history(net)
    with pytest.raises(IngestError, match="unknown branch 'l99'"):
        generate_boundary_conditions(
            net, ts, BoundaryConditionSpec(branches_to_tighten=("l99",)))

    idle = NetworkModel(
        buses=[Bus("b1", kind="slack"), Bus("b2"), Bus("b3")],
        branches=[Branch("l12", "b1", "b2", r=0.01, x=0.05),
                  Branch("l13", "b1", "b3", r=0.01, x=0.05)],
        generators=[Generator("g1", "b1", p_min=-5, p_max=5,
                              q_min=-5, q_max=5, v_set=1.0)],
    )
    hours = 4
    load_p = np.zeros((hours, 3))
    load_p[:, 1] = 0.5        # b3 stays dark, so l13 carries nothing
    ts_idle = TimeSeriesData(load_p=load_p, load_q=0.3 * load_p,
                             fixed_gen_p=np.zeros((hours, 1)),
                             day_hours=hours)
    with pytest.raises(IngestError, match="l13 carries no current"):
        generate_boundary_conditions(
            idle, ts_idle, BoundaryConditionSpec(branches_to_tighten=("l13",)))


def test_relax_slack_widens_active_limits():
    net = six_bus()
    ts = _history(net)
    out = generate_boundary_conditions(
        net, ts, BoundaryConditionSpec(branches_to_tighten=("l23",),
                                       relax_slack_p=True))
    slack = out.generators[out.slack_gen]
    assert slack.p_min == -1e4 and slack.p_max == 1e4
    assert out.generators[out.slack_gen].q_max == net.generators[net.slack_gen].q_max


def test_voltage_violation_rule_places_sites():
    net = _star_net(v_min=0.99 ** 2)
    ts = _history(net, scale=1.5)
    # confirm the baseline actually sags below the floor somewhere
    sagging = set()
    for state in baseline_states(net, ts):
        sagging |= {net.buses[n].id
                    for n in np.flatnonzero(state.vm ** 2 < net.v_min - 1e-9)}
    assert sagging
    spec = BoundaryConditionSpec(tighten_factor=1.0,
                                 candidate_site_rule="voltage-violating",
                                 site_params={"w_max": 0.7, "c_max": 2.8})
    out = generate_boundary_conditions(net, ts, spec)
    assert {s.bus for s in out.candidate_sites} == sagging
    assert all(s.w_max == 0.7 and s.c_max == 2.8 for s in out.candidate_sites)

    calm = _star_net()       # default boxes, nothing violates
    with pytest.raises(IngestError, match="nothing to tighten"):
        generate_boundary_conditions(
            calm, _history(calm),
            BoundaryConditionSpec(candidate_site_rule="voltage-violating"))


def test_explicit_site_rule():
    net = six_bus()
    ts = _history(net)
    out = generate_boundary_conditions(
        net, ts, BoundaryConditionSpec(branches_to_tighten=("l23",),
                                       site_buses=("b2", "b3"),
                                       site_params={"ic_p": 4.0}))
    assert [s.bus for s in out.candidate_sites] == ["b2", "b3"]
    assert all(s.ic_p == 4.0 for s in out.candidate_sites)
    # no explicit buses: the network's own candidates survive
    keep = generate_boundary_conditions(
        net, ts, BoundaryConditionSpec(branches_to_tighten=("l23",)))
    assert keep.candidate_sites == net.candidate_sites
