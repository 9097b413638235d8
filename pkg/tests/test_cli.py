import json
import os
import stat

import pytest

from jiqlab import analytic
from jiqlab.cli import main
from jiqlab.experiments import DEFAULT_SEED, load_manifest, manifest_hash, read_csv
from jiqlab.model import make_params


def run_json(capsys, argv):
    assert main(argv) == 0
    return json.loads(capsys.readouterr().out)


def test_analytic_finite_and_limit(capsys):
    out = run_json(capsys, ["analytic", "--N", "100", "--lambda", "0.9", "--alpha", "0.8,0.2"])
    assert round(out["B"], 4) == 0.6
    assert out["method"] == "closed-form-r2"
    out = run_json(capsys, ["analytic", "--limit", "--lambda", "0.9", "--alpha", "0.6,0.4"])
    assert out["B"] == pytest.approx(0.2)


def test_analytic_methods_agree(capsys):
    base = ["analytic", "--N", "12", "--R", "3", "--lambda", "0.9", "--alpha", "uniform"]
    rec = run_json(capsys, base + ["--method", "symmetric-recursive"])["B"]
    direct = run_json(capsys, base + ["--method", "symmetric-direct"])["B"]
    enum = run_json(capsys, base + ["--method", "enum"])["B"]
    assert rec == pytest.approx(direct, abs=1e-12) and enum == pytest.approx(direct, abs=1e-12)


def test_analytic_bounds(capsys):
    out = run_json(capsys, ["analytic", "--N", "8", "--lambda", "0.9", "--alpha", "0.5,0.3,0.2", "--bounds"])
    assert out["bounds"]["better"] <= out["B"] <= out["bounds"]["worse"]


def test_fluid_fixedpoint(capsys):
    out = run_json(capsys, ["fluid", "fixedpoint", "--scenario", "queueing", "--lambda", "0.9", "--alpha", "0.8,0.2"])
    assert round(out["EW"], 4) == 0.9643
    out = run_json(capsys, ["fluid", "fixedpoint", "--lambda", "0.9", "--alpha", "0.7,0.3", "--beta", "0.7,0.3"])
    assert abs(out["B"]) < 1e-12


def test_fluid_trajectory_reaches_fixed_point(capsys, tmp_path):
    path = tmp_path / "traj.csv"
    assert main(["fluid", "trajectory", "--lambda", "0.9", "--alpha", "0.8,0.2", "--T", "200",
                 "--sample-dt", "10", "--out", str(path)]) == 0
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    assert lines[0] == "t,x_0,x_1,x_2"
    last = [float(v) for v in lines[-1].split(",")]
    assert last[0] == pytest.approx(200.0)
    assert last[1] == pytest.approx(0.36, abs=1e-5)
    assert abs(last[2]) < 1e-9


def test_simulate_json(capsys):
    out = run_json(capsys, ["simulate", "--N", "10", "--lambda", "0.9", "--alpha", "0.8,0.2",
                            "--horizon", "300", "--warmup", "30", "--reps", "3", "--seed", "4"])
    exact, _ = analytic.blocking_probability(make_params(0.9, (0.8, 0.2), N=10))
    assert out["seeds"] == [4, 5, 6]
    assert out["rep_mean"] == pytest.approx(exact, abs=0.03)


def test_parameter_error_exit_code(capsys):
    assert main(["analytic", "--N", "10", "--lambda", "0.9", "--alpha", "0.8,0.3"]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["analytic", "--N", "10", "--lambda", "-1", "--alpha", "0.8,0.2"]) == 2


def test_experiment_fig4_zero_exchange(tmp_path):
    out = tmp_path / "fig4"
    assert main(["experiment", "fig4", "--out", str(out), "--quick", "--nu", "0"]) == 0
    digest, rows = read_csv(out / "fig4.csv")
    assert {float(r["nu"]) for r in rows} == {0.0}
    at_alpha = [r for r in rows if float(r["beta1"]) == pytest.approx(0.7)]
    assert at_alpha and all(abs(float(r["B"])) < 1e-12 for r in at_alpha)
    assert digest == manifest_hash(json.loads((out / "manifest.json").read_text()))


def test_experiment_table1_columns_match_engine(tmp_path):
    out = tmp_path / "t1"
    assert main(["experiment", "table1", "--out", str(out), "--quick", "--N", "10,20", "--reps", "2"]) == 0
    digest, rows = read_csv(out / "table1.csv")
    for r in rows[:-1]:
        for a1 in (0.8, 0.6):
            exact, _ = analytic.blocking_probability(make_params(0.9, (a1, 1 - a1), N=int(r["N"])))
            assert float(r[f"jackson_alpha1={a1}"]) == pytest.approx(exact, abs=1e-12)
            assert float(r[f"simulation_alpha1={a1}"]) == pytest.approx(exact, abs=0.02)
    assert rows[-1]["N"] == "inf"
    assert float(rows[-1]["jackson_alpha1=0.6"]) == pytest.approx(0.2)


def test_manifest_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["experiment", "table1", "--out", str(a), "--quick", "--N", "10", "--reps", "2", "--seed", "11"]) == 0
    assert main(["experiment", "--from-manifest", str(a / "manifest.json"), "--out", str(b)]) == 0
    assert (a / "table1.csv").read_bytes() == (b / "table1.csv").read_bytes()
    assert (a / "manifest.json").read_bytes() == (b / "manifest.json").read_bytes()
    name, settings = load_manifest(a / "manifest.json")
    assert (name, settings["seed"]) == ("table1", 11)


def test_seed_environment_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("JIQLAB_SEED", "777")
    assert main(["experiment", "table1", "--out", str(tmp_path / "e"), "--quick", "--N", "10", "--reps", "2"]) == 0
    assert json.loads((tmp_path / "e" / "manifest.json").read_text())["settings"]["seed"] == 777
    monkeypatch.delenv("JIQLAB_SEED")
    assert main(["experiment", "table1", "--out", str(tmp_path / "d"), "--quick", "--N", "10", "--reps", "2"]) == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["settings"]["seed"] == DEFAULT_SEED


def test_custom_failures_reported(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "engine": "analytic",
        "points": [
            {"lambda": 0.9, "alpha": [0.8, 0.2], "n_servers": 10},
            {"lambda": 0.9, "alpha": [0.8, 0.5], "n_servers": 10},
        ],
    }))
    out = tmp_path / "c"
    assert main(["experiment", "custom", "--config", str(cfg), "--out", str(out)]) == 1
    assert "point 1" in capsys.readouterr().err
    _, rows = read_csv(out / "custom.csv")
    assert float(rows[0]["value"]) == pytest.approx(0.602119427, abs=1e-9)
    assert rows[1]["method"] == "error"


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_output_directory(tmp_path, capsys):
    d = tmp_path / "ro"
    d.mkdir()
    d.chmod(stat.S_IRUSR | stat.S_IXUSR)
    try:
        assert main(["experiment", "table1", "--out", str(d / "x"), "--quick", "--N", "10"]) == 2
        assert "not writable" in capsys.readouterr().err
    finally:
        d.chmod(stat.S_IRWXU)


def test_output_path_that_is_a_file(tmp_path, capsys):
    f = tmp_path / "file"
    f.write_text("")
    assert main(["experiment", "table1", "--out", str(f), "--quick", "--N", "10"]) == 2
    assert "not writable" in capsys.readouterr().err
