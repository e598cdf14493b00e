import json
import os

import pytest

from beeslab.cli import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, main, run_experiment
from beeslab.config import ConfigError, parse_config


def _write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def test_minimal_simulate_config_gets_defaults():
    cfg = parse_config({"command": "simulate", "seeds": [1],
                        "params": {"n_particles": 5, "horizon": 40}})
    assert cfg.params["sub_step"] == 0.01
    assert cfg.params["t_burn"] == pytest.approx(4.0)
    assert cfg.params["process"] == "bees" and cfg.params["mu"] == 0.0


def test_negative_horizon_names_field():
    with pytest.raises(ConfigError) as exc:
        parse_config({"command": "simulate", "seeds": [1],
                      "params": {"n_particles": 5, "horizon": -1}})
    assert any(e.startswith("params.horizon") and "0" in e for e in exc.value.errors)


def test_all_errors_collected_and_unknown_keys_rejected():
    with pytest.raises(ConfigError) as exc:
        parse_config({"command": "fbp", "seeds": [0], "extra": 3,
                      "params": {"h": 0.05, "end_time": 2, "bogus": 1, "mu": "x"}})
    text = " | ".join(exc.value.errors)
    assert "extra" in text and "bogus" in text and "params.mu" in text
    assert len(exc.value.errors) >= 3


def test_command_mismatch_and_bad_json():
    with pytest.raises(ConfigError):
        parse_config('{"command": "fbp", "seeds": [0], "params": {"end_time": 1}}', "brw")
    with pytest.raises(ConfigError):
        parse_config("{not json", "fbp")
    with pytest.raises(ConfigError):
        parse_config({"seeds": [0, 0], "params": {"end_time": 1}}, "fbp")


def test_semantic_checks():
    with pytest.raises(ConfigError) as exc:
        parse_config({"seeds": [0], "params": {"n_particles": 3, "horizon": 5, "t_burn": 9}},
                     "simulate")
    assert any("t_burn" in e for e in exc.value.errors)
    with pytest.raises(ConfigError):
        parse_config({"seeds": [0], "params": {"n_particles": 2, "horizon": 5, "mode": "abs",
                                               "mu": 0.3}}, "couple")
    with pytest.raises(ConfigError):
        parse_config({"seeds": list(range(5)), "params": {"n_particles": 3, "m": 10}}, "critical")
    with pytest.raises(ConfigError):
        parse_config({"seeds": [0], "params": {"h": 0.01, "dt": 0.001, "end_time": 1}}, "fbp")


def test_sweep_plan_has_fifteen_cells():
    cfg = parse_config({"seeds": [1, 2], "params": {"n_values": [10, 50, 200], "horizon": 100}},
                       "sweep")
    assert len(cfg.plan) == 15
    assert {(c["N"], c["mu_factor"]) for c in cfg.plan} == {
        (n, f) for n in (10, 50, 200) for f in (0.0, 0.5, -0.5, 1.5, -1.5)}
    assert cfg.to_dict()["plan"] == cfg.plan


def test_rerun_gives_identical_checksums(tmp_path):
    doc = {"command": "simulate", "seeds": [1, 2],
           "params": {"n_particles": 4, "horizon": 5, "sub_step": 0.5}}
    a = run_experiment(parse_config(doc), str(tmp_path / "a"))
    b = run_experiment(parse_config(doc), str(tmp_path / "b"))
    assert a.files == b.files and len(a.files) == 3
    assert a.status == "ok"
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert set(man["files"]) == set(a.files) and man["seeds"] == [1, 2]


def test_parallel_jobs_match_serial(tmp_path):
    doc = {"command": "velocity", "seeds": [1, 2, 3],
           "params": {"n_values": [3], "horizon": 20, "sub_step": 1}}
    a = run_experiment(parse_config(doc), str(tmp_path / "a"), jobs=1)
    b = run_experiment(parse_config(doc), str(tmp_path / "b"), jobs=2)
    assert a.files == b.files


def test_sweep_isolates_failed_cell(tmp_path):
    doc = {"command": "sweep", "seeds": [1, 2, 3],
           "params": {"n_values": [0, 4], "mu_factors": [0.0, 1.5], "horizon": 30, "sub_step": 1}}
    m = run_experiment(parse_config(doc), str(tmp_path))
    assert m.status == "partial"
    status = {(c["N"], c["mu_factor"]): c["status"] for c in m.cells}
    assert status[(0, 0.0)] == "failed" and status[(0, 1.5)] == "failed"
    assert status[(4, 0.0)] == "ok" and status[(4, 1.5)] == "ok"
    rows = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(rows) == 3


def test_regimes_share_mu_c(tmp_path):
    doc = {"command": "regimes", "seeds": [1, 2, 3],
           "params": {"n_particles": 20, "horizon": 40, "sub_step": 1,
                      "mu_factors": [0.0, 1.5, -1.5]}}
    run_experiment(parse_config(doc), str(tmp_path))
    reps = json.loads((tmp_path / "regimes.json").read_text())
    assert len(reps) == 3
    assert len({r["mu_c_hat"] for r in reps}) == 1
    assert {r["regime"] for r in reps} <= {"SubCritical", "Critical", "SuperCritical"}


def test_main_exit_codes(tmp_path, capsys):
    good = _write(tmp_path, {"seeds": [0], "params": {"h": 0.05, "end_time": 0.5}})
    assert main(["fbp", "--config", good, "--out", str(tmp_path / "o")]) == EXIT_OK
    assert os.path.exists(tmp_path / "o" / "snapshots.csv")
    bad = _write(tmp_path, {"seeds": [0], "params": {"h": -1}}, "bad.json")
    assert main(["fbp", "--config", bad]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "params.h" in err and "end_time" in err
    assert main(["fbp", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG


def test_invariant_violation_exit_code(tmp_path):
    cfg = _write(tmp_path, {"seeds": [0], "params": {"half_width": 1.0, "h": 0.05, "end_time": 1,
                                                     "initial_interval": [-0.95, 0.95]}})
    out = tmp_path / "o"
    assert main(["fbp", "--config", cfg, "--out", str(out)]) == EXIT_INVARIANT
    assert json.loads((out / "manifest.json").read_text())["status"] == "violation"


def test_jobs_from_environment(tmp_path, monkeypatch):
    cfg = _write(tmp_path, {"seeds": [1, 2], "params": {"n_particles": 3, "horizon": 2,
                                                        "sub_step": 0.5}})
    monkeypatch.setenv("BEESLAB_JOBS", "2")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_OK
    monkeypatch.setenv("BEESLAB_JOBS", "many")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
