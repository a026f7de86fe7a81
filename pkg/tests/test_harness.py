import json
import shutil
import subprocess

import numpy as np
import pytest

from safelearn import cli
from safelearn.config import ConfigError, ExperimentConfig, from_dict, load
from safelearn.emit import RunRecord, emit, fmt
from safelearn.exploration import run_algorithm1
from safelearn.tracking import track


def cfg_for(experiment, **kw):
    return from_dict({"experiment": experiment, **kw})


# -- config ------------------------------------------------------------------


def test_defaults_and_overrides():
    cfg = from_dict({"experiment": "tracking", "seed": 3}, seed=7, tau=None)
    assert cfg.seed == 7 and cfg.tau == 0.02 and cfg.gp_budget == 300
    assert cfg.plant().mass_ratio == 1.4
    assert cfg.gains().pole_k == (15.0, 18.5, 7.5)


@pytest.mark.parametrize(
    "doc",
    [
        {"experiment": "tracking", "kp_typo": 1.0},
        {"experiment": "bogus"},
        {"experiment": "tracking", "dt": 0.0},
        {"experiment": "tracking", "mu_lo": 7.0},
        {"experiment": "tracking", "poles": [1.0, -2.0, -3.0]},
        {"experiment": "tracking", "thrust_box": [0.0, -1.0]},
        {"experiment": "tracking", "gp_features": "xyz"},
        {"experiment": "tracking", "ref_amplitude": [1.0, 1.0]},
        {"experiment": "tracking", "gp_budget": 0},
    ],
)
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_load_reads_lists_and_reports_bad_files(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"experiment": "barrier-learning", "wind_accel": [0.0, 0.0, 0.5]}))
    cfg = load(p)
    assert cfg.wind_accel == (0.0, 0.0, 0.5)
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load(p)
    with pytest.raises(ConfigError, match="cannot read"):
        load(tmp_path / "missing.json")


def test_config_round_trip_and_digest():
    cfg = cfg_for("barrier-learning", seed=5, disturbances=[[1.0, 0.5]])
    again = from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg and again.digest() == cfg.digest()
    assert cfg.replace(seed=6).digest() != cfg.digest()


@pytest.mark.skipif(shutil.which("git") is None, reason="git not installed")
def test_digest_matches_git_blob_hash():
    cfg = ExperimentConfig()
    body = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    out = subprocess.run(["git", "hash-object", "--stdin"], input=body.encode(), capture_output=True, check=True)
    assert out.stdout.decode().strip() == cfg.digest()


# -- emission ----------------------------------------------------------------


def test_fmt():
    assert fmt(True) == "1" and fmt(np.int64(3)) == "3" and fmt("x") == "x"
    assert fmt(0.1) == "0.1" and fmt(1 / 3) == "0.3333333333"


def test_record_rejects_wrong_width():
    rec = RunRecord("r", ("a", "b"))
    with pytest.raises(ValueError):
        rec.append(1.0)


def test_emit_is_deterministic(tmp_path):
    def build():
        rng = np.random.default_rng(0)
        rec = RunRecord("run", ("t", "x"))
        for k in range(50):
            rec.append(k * 0.01, rng.normal())
        rec.summary["mean"] = float(rec.column("x").mean())
        return rec

    cfg = ExperimentConfig()
    emit([build()], tmp_path / "a", cfg, {"note": np.float64(1.5)})
    emit([build()], tmp_path / "b", cfg, {"note": np.float64(1.5)})
    for name in ("run.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["config_hash"] == cfg.digest()
    assert man["files"]["run.csv"]["columns"] == ["t", "x"]
    assert man["files"]["run.csv"]["rows"] == 50


def test_emit_surfaces_io_errors(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        emit([RunRecord("r", ("a",))], blocker / "sub")


# -- orchestration -----------------------------------------------------------


def test_zero_iteration_cap_returns_initial_certificate():
    res = run_algorithm1(cfg_for("barrier-learning", max_iterations=0))
    assert res.cert.mu == 6.3 and res.mu_trace == [6.3] and len(res.record) == 0


def test_oracle_run_expands_once():
    res = run_algorithm1(cfg_for("barrier-learning", oracle_residual=True))
    assert res.expansions == 1
    assert res.mu_trace[1] < 6.3
    assert all(m == res.mu_trace[1] for m in res.mu_trace[1:])


def test_algorithm1_trace_and_safety_audit():
    res = run_algorithm1(cfg_for("barrier-learning"))
    mu = np.array(res.mu_trace)
    assert np.all(np.diff(mu) <= 0) and mu[-1] < 2.0
    rec = res.record
    assert np.all(np.diff(rec.column("t")) > 0)
    h, tube = rec.column("h"), rec.column("in_tube").astype(bool)
    assert np.all(h[tube] >= -1e-3)
    assert rec.column("gp_points").max() <= 300


def test_matched_plant_tracking_runs_identical():
    cfg = cfg_for("tracking", mass_ratio=1.0, wind_accel=[0.0, 0.0, 0.0], measurement_noise=0.0, horizon=3.0)
    a, _ = track(cfg, True)
    b, _ = track(cfg, False)
    for col in ("x", "y", "z", "f"):
        assert np.allclose(a.column(col), b.column(col), atol=1e-9)


def test_tracking_budget_audit():
    cfg = cfg_for("tracking", gp_budget=40, horizon=1.0)
    rec, times = track(cfg, True)
    n = rec.column("gp_points")
    assert len(rec) == round(cfg.horizon / cfg.dt) == len(times)
    assert n.max() == 40
    # one add per step and one eviction once full
    assert np.array_equal(n, np.minimum(np.arange(1, len(n) + 1), 40))
    assert np.all(np.isclose(np.diff(rec.column("t")), cfg.dt))


# -- CLI ---------------------------------------------------------------------


def test_cli_config_error(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"experiment": "tracking", "nope": 1}))
    assert cli.main(["tracking", "--config", str(p)]) == cli.EXIT_CONFIG
    assert "nope" in capsys.readouterr().err


def test_cli_certificate_abort(tmp_path):
    code = cli.main(["barrier-learning", "--kdelta", "50", "--out", str(tmp_path), "--no-figures"])
    assert code == cli.EXIT_ABORT


def test_cli_barrier_learning_writes_outputs(tmp_path, capsys):
    code = cli.main(["barrier-learning", "--out", str(tmp_path), "--seed", "1"])
    assert code == cli.EXIT_OK
    names = {p.name for p in tmp_path.iterdir()}
    assert {"barrier_learning.csv", "mu_trace.csv", "coverage.csv", "manifest.json",
            "barrier_region.png", "mu_trace.png"} <= names
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 1 and man["certificate"]["mu"] < 6.3
    assert "mu_final=" in capsys.readouterr().out


def test_cli_config_file_and_experiment_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"experiment": "tracking", "horizon": 0.5}))
    out = tmp_path / "o"
    assert cli.main(["tracking", "--config", str(p), "--out", str(out), "--no-figures"]) == cli.EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert man["files"]["tracking_gp.csv"]["rows"] == 50
    assert "gp_timing" in man
