import json
import subprocess
import sys

import numpy as np
import pytest

from slackdyn import caseio
from slackdyn.cli import main, svg_plot
from slackdyn.dynsim import Trajectory
from slackdyn.errors import SchemaError
from slackdyn.slackcheck import check


@pytest.fixture(scope="module")
def scenario_i(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenario_i")
    code = main(["run", "--case", "wscc9_machines", "--scenario", "load_loss", "--out", str(out), "--plot"])
    return code, out


@pytest.fixture(scope="module")
def undamped(tmp_path_factory):
    out = tmp_path_factory.mktemp("undamped")
    code = main(["run", "--case", "two_machine_undamped", "--scenario", "kick", "--out", str(out)])
    return code, out


def test_powerflow_single(capsys):
    assert main(["powerflow", "--case", "wscc9_machines"]) == 0
    text = capsys.readouterr().out
    assert "converged" in text
    assert "0.716410" in text


def _losses(text):
    return float(next(ln for ln in text.splitlines() if ln.startswith("losses")).split()[1])


def test_powerflow_distributed_equal(capsys, tmp_path):
    assert main(["powerflow", "--case", "wscc9_machines", "--slack-mode", "distributed", "--participation", "equal"]) == 0
    eq = capsys.readouterr().out
    pfile = tmp_path / "k.json"
    pfile.write_text(json.dumps({"1": 1 / 3, "2": 1 / 3, "3": 1 / 3}))
    assert main(["powerflow", "--case", "wscc9_machines", "--slack-mode", "distributed", "--participation", str(pfile)]) == 0
    fromfile = capsys.readouterr().out
    assert abs(_losses(eq) - _losses(fromfile)) < 1e-6
    rows = [ln.split() for ln in eq.splitlines() if ln.strip()[:1].isdigit() and len(ln.split()) == 5]
    sigma = float(next(ln for ln in eq.splitlines() if ln.startswith("slack sigma_hat")).split()[2])
    p_gen = {int(r[0]): float(r[3]) for r in rows}
    for bus, p0 in ((1, 0.0), (2, 1.63), (3, 0.85)):
        assert p_gen[bus] - p0 == pytest.approx(sigma / 3, abs=1e-6)


def test_powerflow_divergence_exit_2(tmp_path, capsys):
    raw = json.loads(caseio.bundled_case_path("wscc9_machines").read_text())
    for ld in raw["loads"]:
        ld["p"] *= 40.0
    path = tmp_path / "heavy.json"
    path.write_text(json.dumps(raw))
    assert main(["powerflow", "--case", str(path)]) == 2
    err = capsys.readouterr().err
    assert "iteration" in err


def test_run_scenario_i_strong(scenario_i):
    code, out = scenario_i
    assert code == 0
    for name in ("trajectory.csv", "powersplit.csv", "capability.json", "theta1.svg"):
        assert (out / name).is_file()
    cap = json.loads((out / "capability.json").read_text())
    assert cap["verdict"] == "Strong"
    assert cap["power_split"]["ok"]


def test_csv_schema(scenario_i):
    _, out = scenario_i
    raw = (out / "trajectory.csv").read_bytes()
    assert b"\r\n" not in raw
    header = raw.split(b"\n", 1)[0].decode().split(",")
    assert header[0] == "t"
    assert "bus1.v" in header and "bus1.theta" in header
    assert {"devG1.delta", "devG1.omega", "devG1.ps", "devG1.pt", "devG1.p", "omega_coi"} <= set(header)


def test_check_scenario_i(scenario_i, capsys):
    _, out = scenario_i
    assert main(["check", "--traj", str(out / "trajectory.csv"), "--mode", "strong"]) == 0
    assert "Strong" in capsys.readouterr().out


def test_csv_round_trip_same_verdict(scenario_i):
    _, out = scenario_i
    traj = Trajectory.from_csv(out / "trajectory.csv")
    again = out / "again.csv"
    traj.to_csv(again)
    a = check(traj, "strong")
    b = check(Trajectory.from_csv(again), "strong")
    assert a.verdict == b.verdict
    assert a.sigma_hat_estimate == b.sigma_hat_estimate


def test_undamped_strong_fails_weak_passes(undamped):
    code, out = undamped
    assert code == 0
    path = str(out / "trajectory.csv")
    assert main(["check", "--traj", path, "--mode", "strong"]) == 4
    assert main(["check", "--traj", path, "--mode", "weak"]) == 0


def test_truncated_csv_schema_error(scenario_i, tmp_path):
    _, out = scenario_i
    lines = (out / "trajectory.csv").read_text().splitlines()
    bad = tmp_path / "cut.csv"
    bad.write_text("\n".join(lines[:50]) + "\n" + lines[50][: len(lines[50]) // 2] + "\n")
    with pytest.raises(SchemaError):
        Trajectory.from_csv(bad)
    assert main(["check", "--traj", str(bad), "--mode", "strong"]) == 1


def test_scenario_iv_exit_3_with_partial_outputs(tmp_path):
    code = main(["run", "--case", "wscc9_gfl", "--scenario", "load_loss", "--out", str(tmp_path), "--plot"])
    assert code == 3
    traj = Trajectory.from_csv(tmp_path / "trajectory.csv")
    assert 1.0 <= traj.times[-1] < 2.0
    cap = json.loads((tmp_path / "capability.json").read_text())
    assert cap["failure"]["type"] == "StepNewtonDiverged"
    assert (tmp_path / "theta1.svg").is_file()


def test_no_event_flat_theta(tmp_path):
    assert main(["run", "--case", "wscc9_machines", "--scenario", "no_event", "--out", str(tmp_path), "--plot"]) == 0
    traj = Trajectory.from_csv(tmp_path / "trajectory.csv")
    assert np.ptp(traj.column("bus1.theta")) < 1e-9
    svg = (tmp_path / "theta1.svg").read_text()
    pts = svg.split('points="')[1].split('"')[0].split()
    ys = {p.split(",")[1] for p in pts}
    assert len(ys) == 1


def test_parallel_jobs(tmp_path):
    code = main(
        ["run", "--case", "wscc9_gfm_droop", "--scenario", "all", "--t-end", "3", "--jobs", "2", "--out", str(tmp_path)]
    )
    assert code == 0
    for sc in ("load_loss", "no_event"):
        assert Trajectory.from_csv(tmp_path / sc / "trajectory.csv").times[-1] == pytest.approx(3.0)


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--case", "wscc9_machines"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["run", "--case", "wscc9_machines", "--scenario", "load_loss", "--dt", "-1", "--out", str(tmp_path)])
    assert exc.value.code == 1
    assert main(["run", "--case", "wscc9_machines", "--scenario", "nope", "--out", str(tmp_path)]) == 1
    assert main(["powerflow", "--case", str(tmp_path / "missing.json")]) == 1


def test_svg_plot_has_axes_and_ticks():
    t = np.linspace(0, 2, 50)
    svg = svg_plot({"x": (t, np.sin(t))}, "t [s]", "y", "demo")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert svg.count("<polyline") == 1
    assert "t [s]" in svg and ">0.5<" in svg


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "slackdyn", "cases"], capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert "wscc9_machines.json" in res.stdout
