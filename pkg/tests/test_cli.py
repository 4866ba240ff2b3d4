"""End-to-end runs of the command-line front end on a small congested grid."""
import csv
import json
import os

import numpy as np
import pytest

import bessplan.cli as cli
from bessplan.caseio import read_case, write_case

from fixtures import three_bus_congested

_TIMING_FREE = ("iteration", "lb", "ub", "gap", "n_feasible")


def _write_inputs(root):
    """Case + series files for the one-site congested triangle."""
    os.makedirs(root, exist_ok=True)
    net, p_load, q_load, p_gen = three_bus_congested(hours=6)
    write_case(net, os.path.join(root, "grid.case"))
    ids = [b.id for b in net.buses]
    cli._write_series(os.path.join(root, "load_p.csv"), ids, p_load.T)
    cli._write_series(os.path.join(root, "load_q.csv"), ids, q_load.T)
    return net


def _write_config(root, out, extra="", name="run.ini"):
    path = os.path.join(root, name)
    with open(path, "w") as fh:
        fh.write("""
[paths]
case = %s
series = %s
series_q = %s
out = %s

[run]
day_hours = 6
%s
""" % (os.path.join(root, "grid.case"), os.path.join(root, "load_p.csv"),
       os.path.join(root, "load_q.csv"), out, extra))
    return path


@pytest.fixture(scope="module")
def planned(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("cli"))
    net = _write_inputs(root)
    out = os.path.join(root, "run")
    ini = _write_config(root, out)
    assert cli.main(["ingest", "--config", ini]) == 0
    assert cli.main(["plan", "--config", ini]) == 0
    return {"root": root, "out": out, "ini": ini, "net": net}


def test_ingest_writes_a_verifiable_bundle(planned):
    bundle = os.path.join(planned["out"], "bundle")
    with open(os.path.join(bundle, "manifest.json")) as fh:
        manifest = json.load(fh)
    assert manifest["n_bus"] == 3 and manifest["n_site"] == 1
    assert manifest["n_days"] == 1 and manifest["day_hours"] == 6
    assert cli._bundle_hash(bundle, manifest["files"]) == manifest["sha256"]
    # the canonical case round-trips to the ingested network
    again = read_case(os.path.join(bundle, "network.case"))
    assert [b.id for b in again.buses] == [b.id for b in planned["net"].buses]
    np.testing.assert_allclose(again.i_max, planned["net"].i_max, rtol=1e-12)


def test_plan_artifacts(planned):
    out = planned["out"]
    with open(os.path.join(out, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["converged"] is True
    assert summary["refinement_converged"] is True
    assert summary["u"] == [1]
    assert summary["lb"] <= summary["ub"] + 1e-9
    assert 0.0 <= summary["gap"] < 5e-3

    with open(os.path.join(out, "plan.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    assert rows[0]["site"] == "s1" and rows[0]["u"] == "1"
    assert float(rows[0]["w"]) == pytest.approx(summary["w"][0])

    with open(os.path.join(out, "convergence.csv")) as fh:
        conv = list(csv.DictReader(fh))
    assert len(conv) == summary["iterations"]
    assert int(conv[-1]["n_feasible"]) == 1

    with open(os.path.join(out, "trace.jsonl")) as fh:
        trace = [json.loads(line) for line in fh]
    assert len(trace) == summary["iterations"]
    assert trace[-1]["gap"] == summary["gap"]

    with open(os.path.join(out, "residuals.csv")) as fh:
        res = list(csv.DictReader(fh))
    assert len(res) == 1 and float(res[0]["max_cone_gap"]) >= 0.0
    for name in ("sizes.csv", "timing.csv", "gaps.csv", "convergence.png"):
        assert os.path.getsize(os.path.join(out, name)) > 0


def _non_timing_bytes(out):
    """Everything the reproducibility contract covers, as one blob."""
    blob = []
    for name in ("plan.csv", "gaps.csv", "residuals.csv", "sizes.csv"):
        with open(os.path.join(out, name)) as fh:
            blob.append(fh.read())
    with open(os.path.join(out, "convergence.csv")) as fh:
        for row in csv.DictReader(fh):
            blob.append("|".join(row[c] for c in _TIMING_FREE))
    return "\n".join(blob)


def test_repeated_runs_are_byte_identical(planned, tmp_path):
    out2 = str(tmp_path / "again")
    ini2 = _write_config(planned["root"], out2, name="again.ini")
    assert cli.main(["ingest", "--config", ini2]) == 0
    assert cli.main(["plan", "--config", ini2]) == 0

    with open(os.path.join(planned["out"], "bundle", "manifest.json")) as fh:
        first = json.load(fh)["sha256"]
    with open(os.path.join(out2, "bundle", "manifest.json")) as fh:
        assert json.load(fh)["sha256"] == first
    assert _non_timing_bytes(planned["out"]) == _non_timing_bytes(out2)


def test_validate_compares_against_the_one_shot_model(planned, tmp_path):
    out = str(tmp_path / "val")
    ini = _write_config(planned["root"], out, name="val.ini", extra="""
validation_mode = relax-integrality-socp

[tolerances]
delta = 1e-3
""")
    assert cli.main(["ingest", "--config", ini]) == 0
    assert cli.main(["validate", "--config", ini]) == 0
    with open(os.path.join(out, "validation.json")) as fh:
        report = json.load(fh)
    assert report["decomposed_converged"] is True
    assert report["centralized_error"] is None
    assert abs(report["objective_difference"]) <= 1e-3 + 1e-6
    assert report["max_linking_residual"] <= 1e-3

    with open(os.path.join(out, "linking.csv")) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    drift = abs(float(rows[0]["w_decomposed"]) -
                float(rows[0]["w_centralized"]))
    assert drift == pytest.approx(report["max_linking_residual"], abs=1e-12)

    with open(os.path.join(out, "state_differences.csv")) as fh:
        diffs = list(csv.DictReader(fh))
    assert {r["variable"] for r in diffs} >= {"V", "theta", "sto_p"}
    assert all(float(r["max_abs_difference"]) >= 0.0 for r in diffs)


def test_validate_requires_a_validation_mode(planned, capsys):
    assert cli.main(["validate", "--config", planned["ini"]]) == 2
    assert "validation_mode" in capsys.readouterr().err


def test_report_summarizes_the_instance(planned, capsys):
    with pytest.warns(UserWarning):     # 1-day horizon leaves seasons empty
        assert cli.main(["report", "--config", planned["ini"]]) == 0
    out = capsys.readouterr().out
    assert "subproblem" in out and "representative days: 0" in out
    path = os.path.join(planned["out"], "instance_sizes.csv")
    with open(path) as fh:
        rows = {r["mode"]: r for r in csv.DictReader(fh)}
    assert set(rows) == {"centralized", "master", "subproblem"}
    assert int(rows["master"]["binary_vars"]) == 1


def test_nonconvergence_exits_nonzero_with_trace(planned, tmp_path, capsys):
    out = str(tmp_path / "capped")
    ini = _write_config(planned["root"], out, name="capped.ini",
                        extra="max_iterations = 1\n")
    assert cli.main(["ingest", "--config", ini]) == 0
    assert cli.main(["plan", "--config", ini]) == 1
    assert "did not converge" in capsys.readouterr().out
    with open(os.path.join(out, "trace.jsonl")) as fh:
        assert len(fh.readlines()) == 1
    with open(os.path.join(out, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["converged"] is False and summary["ub"] is None


def test_missing_bundle_points_at_ingest(planned, tmp_path, capsys):
    ini = _write_config(planned["root"], str(tmp_path / "void"),
                        name="void.ini")
    assert cli.main(["plan", "--config", ini]) == 2
    assert "run ingest first" in capsys.readouterr().err


def test_ingestion_errors_carry_file_and_line(planned, tmp_path, capsys):
    root = planned["root"]
    bad = str(tmp_path / "bad.csv")
    with open(os.path.join(root, "load_p.csv")) as fh:
        lines = fh.read().splitlines()
    cells = lines[2].split(",")
    cells[1] = "oops"
    lines[2] = ",".join(cells)
    with open(bad, "w") as fh:
        fh.write("\n".join(lines))
    ini = os.path.join(str(tmp_path), "bad.ini")
    with open(ini, "w") as fh:
        fh.write("[paths]\ncase = %s\nseries = %s\nout = %s\n"
                 "[run]\nday_hours = 6\n"
                 % (os.path.join(root, "grid.case"), bad, tmp_path / "out"))
    assert cli.main(["ingest", "--config", ini]) == 2
    err = capsys.readouterr().err
    assert "bad.csv line 3" in err and "'oops'" in err and "b2" in err


def test_worker_overrides(planned, tmp_path, capsys, monkeypatch):
    out = str(tmp_path / "env")
    ini = _write_config(planned["root"], out, name="env.ini",
                        extra="max_iterations = 1\n")
    assert cli.main(["ingest", "--config", ini]) == 0

    monkeypatch.setenv("BESSPLAN_WORKERS", "2")
    assert cli.main(["plan", "--config", ini]) == 1
    with open(os.path.join(out, "summary.json")) as fh:
        assert json.load(fh)["workers"] == 2

    assert cli.main(["plan", "--config", ini, "--workers", "1"]) == 1
    with open(os.path.join(out, "summary.json")) as fh:
        assert json.load(fh)["workers"] == 1

    monkeypatch.setenv("BESSPLAN_WORKERS", "several")
    assert cli.main(["plan", "--config", ini]) == 2
    assert "BESSPLAN_WORKERS" in capsys.readouterr().err


def test_seed_and_out_flags_land_in_the_run(planned, tmp_path):
    out = str(tmp_path / "flagged")
    ini = _write_config(planned["root"], str(tmp_path / "ignored"),
                        name="flagged.ini", extra="max_iterations = 1\n")
    assert cli.main(["ingest", "--config", ini, "--out", out]) == 0
    assert cli.main(["plan", "--config", ini, "--out", out,
                     "--seed", "7"]) == 1
    with open(os.path.join(out, "summary.json")) as fh:
        summary = json.load(fh)
    assert summary["seed"] == 7
    assert not os.path.exists(str(tmp_path / "ignored"))


_MATRIX = """function mpc = two
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t10\t0\t0\t0\t1\t1.0\t0\t230\t1\t1.1\t0.9;
\t2\t1\t50\t20\t0\t0\t1\t1.0\t0\t230\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t0\t0\t300\t-300\t1.0\t100\t1\t250\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.05\t0\t0\t0\t0\t0\t0\t1\t-30\t30;
];
"""


def test_matrix_case_ingest_reconstructs_reactive(tmp_path):
    root = str(tmp_path)
    case = os.path.join(root, "two.m")
    with open(case, "w") as fh:
        fh.write(_MATRIX)
    hours = np.array([[0.10, 0.40], [0.12, 0.50], [0.08, 0.30],
                      [0.10, 0.45]])
    cli._write_series(os.path.join(root, "load_p.csv"), ["1", "2"], hours)
    ini = os.path.join(root, "m.ini")
    with open(ini, "w") as fh:
        fh.write("[paths]\ncase = %s\nseries = %s\nout = %s\n"
                 "[run]\nday_hours = 4\n"
                 % (case, os.path.join(root, "load_p.csv"),
                    os.path.join(root, "out")))
    assert cli.main(["ingest", "--config", ini]) == 0
    with open(os.path.join(root, "out", "bundle", "load_q.csv")) as fh:
        rows = list(csv.reader(fh))
    got = np.array([[float(x) for x in row] for row in rows[1:]])
    # snapshot at bus 2: 20 Mvar over 50 MW; the machine bus borrows it
    np.testing.assert_allclose(got, hours * 0.4, rtol=1e-12)


def test_boundary_section_reshapes_the_network(planned, tmp_path):
    out = str(tmp_path / "tight")
    ini = _write_config(planned["root"], out, name="tight.ini", extra="""
[boundary]
tighten_factor = 0.9
tighten_branches = l23
relax_slack_p = true
""")
    assert cli.main(["ingest", "--config", ini]) == 0
    net = read_case(os.path.join(out, "bundle", "network.case"))
    k = [l.id for l in net.branches].index("l23")
    assert net.i_max[k] < planned["net"].i_max[k]
    slack = net.generators[net.slack_gen]
    assert slack.p_max == pytest.approx(1e4)


def test_parser_contract():
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args([])               # subcommand required
    with pytest.raises(SystemExit):
        cli.build_parser().parse_args(["plan"])         # --config required
    args = cli.build_parser().parse_args(
        ["plan", "--config", "x.ini", "--workers", "4", "--seed", "9",
         "--out", "d"])
    assert args.func is cli.cmd_plan
    assert (args.workers, args.seed, args.out) == (4, 9, "d")
