import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mfbf.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, RunConfig, main
from mfbf.sim import EXPERIMENT_REACH, EXPERIMENT_SWAP_ANGLE

TINY = ["T=40", "N=10", "n_initial=40", "hidden=[8]", "epochs=2", "mc_samples=4", "batch_size=16", "grid_n=11"]


def run(cmd, out, *sets, extra=()):
    args = [cmd, "--out", str(out), *extra]
    for s in TINY + list(sets):
        args += ["--set", s]
    return main(args)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", out) == EXIT_OK
    return out / "h0.json"


def test_generate_rows_and_byte_identical_rerun(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("generate", a, extra=["--seed", "5"]) == EXIT_OK
    assert run("generate", b, extra=["--seed", "5"]) == EXIT_OK
    rows = read_rows(a / "dataset.csv")
    assert len(rows) == 10
    assert list(rows[0]) == [f"x0_{i}" for i in range(8)] + ["u_idx", "rho_min", "rho_min_tail"]
    assert (a / "dataset.csv").read_bytes() == (b / "dataset.csv").read_bytes()
    meta = json.loads((a / "dataset.csv.meta.json").read_text())
    assert meta["seed"] == 5 and meta["command"] == "generate" and len(meta["config_hash"]) == 64
    assert meta["config"]["N"] == 10


def test_generate_with_filter_and_delta(tmp_path):
    assert run("generate", tmp_path, "barrier=exact-turn", "record_delta=true", "barrier_horizon=60") == EXIT_OK
    rows = read_rows(tmp_path / "dataset.csv")
    assert all(0 <= int(r["u_idx"]) < 9 and r["rho_min_tail"] != "" for r in rows)


def test_jobs_do_not_change_outputs(tmp_path):
    assert run("generate", tmp_path / "j1", "N=300", extra=["--jobs", "1"]) == EXIT_OK
    assert run("generate", tmp_path / "j2", "N=300", extra=["--jobs", "2"]) == EXIT_OK
    assert (tmp_path / "j1/dataset.csv").read_bytes() == (tmp_path / "j2/dataset.csv").read_bytes()


@pytest.mark.parametrize("bad", ["lam=1.5", "ds=0", "v_min=-1", "T=0", "no_such_key=1", "epochs=abc",
                                 "swap_angle_deg=200", "reach=0", "optimizer=lbfgs"])
def test_invalid_configuration_exits_2(tmp_path, bad, capsys):
    assert run("generate", tmp_path, bad) == EXIT_INVALID
    assert "invalid configuration" in capsys.readouterr().err
    assert not (tmp_path / "dataset.csv").exists()


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["fly", "--out", str(tmp_path)])
    assert e.value.code == EXIT_INVALID
    assert main(["generate", "--out", str(tmp_path), "--set", "N"]) == EXIT_INVALID


def test_runtime_error_exits_1(tmp_path):
    assert run("evaluate", tmp_path, "variants=[learned]", f"checkpoint={tmp_path / 'missing.json'}") == EXIT_RUNTIME


def test_missing_checkpoint_is_a_validation_error(tmp_path):
    assert run("iterate", tmp_path) == EXIT_INVALID


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("N: 7\nseed: 3\nT: 30\nlam: 0.5\n")
    assert main(["generate", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "o")]) == EXIT_OK
    meta = json.loads((tmp_path / "o/dataset.csv.meta.json").read_text())
    assert meta["seed"] == 4 and meta["config"]["lam"] == 0.5
    assert len(read_rows(tmp_path / "o/dataset.csv")) == 7
    js = tmp_path / "run.json"
    js.write_text(json.dumps({"N": 3, "T": 20}))
    assert main(["generate", "--config", str(js), "--out", str(tmp_path / "p"), "--set", "N=4"]) == EXIT_OK
    assert len(read_rows(tmp_path / "p/dataset.csv")) == 4
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    assert main(["generate", "--config", str(tmp_path / "list.yaml"), "--out", str(tmp_path)]) == EXIT_INVALID


def test_run_config_defaults_match_experiment_settings():
    cfg = RunConfig()
    assert (cfg.ds, cfg.clip, cfg.lr, cfg.dropout, cfg.mc_samples, cfg.n_sigma) == (25.0, 50.0, 1e-4, 0.5, 50, 3.0)
    assert cfg.train_config().optimizer == "sgd"
    assert cfg.nominal().action_set.actions.shape == (9, 6)
    assert (cfg.nominal().swap_angle, cfg.nominal().reach) == pytest.approx((EXPERIMENT_SWAP_ANGLE, EXPERIMENT_REACH))
    with pytest.raises(Exception):
        RunConfig.from_mapping({"lam": -0.1})


def test_train_writes_h0_delta_and_metrics(tmp_path):
    assert run("train", tmp_path, "record_delta=true") == EXIT_OK
    assert (tmp_path / "h0.json").exists() and (tmp_path / "delta.json").exists()
    rows = read_rows(tmp_path / "metrics_h0.csv")
    assert len(rows) == 1 and rows[0]["iteration"] == "0"
    assert run("evaluate", tmp_path / "ev", "n_eval=4", "variants=[none,learned]",
               f"checkpoint={tmp_path / 'h0.json'}", f"delta_checkpoint={tmp_path / 'delta.json'}") == EXIT_OK


def test_iterate_three_checkpoints_and_resume(tmp_path, trained):
    a = tmp_path / "a"
    assert run("iterate", a, "L=3", f"checkpoint={trained}") == EXIT_OK
    names = sorted(p.name for p in a.glob("iter_*.json") if not p.name.endswith(".meta.json"))
    assert names == ["iter_001.json", "iter_002.json", "iter_003.json"]
    rows = read_rows(a / "metrics.csv")
    assert [r["iteration"] for r in rows] == ["1", "2", "3"]
    assert set(rows[0]) == {"iteration", "val_mse", "train_mse", "overpred_pct", "mean_target", "unsafe_cells"}
    # rerun is byte-identical
    b = tmp_path / "b"
    assert run("iterate", b, "L=3", f"checkpoint={trained}") == EXIT_OK
    for name in names + ["metrics.csv"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    # stop after one iteration, then resume to three
    c = tmp_path / "c"
    assert run("iterate", c, "L=1", f"checkpoint={trained}") == EXIT_OK
    assert run("iterate", c, "L=3", "resume=true", f"checkpoint={trained}") == EXIT_OK
    for name in names + ["metrics.csv"]:
        assert (a / name).read_bytes() == (c / name).read_bytes()
    # resuming a finished run is a no-op
    assert run("iterate", c, "L=3", "resume=true", f"checkpoint={trained}") == EXIT_OK


def test_evaluate_two_variants(tmp_path, trained):
    assert run("evaluate", tmp_path, "n_eval=6", f"checkpoint={trained}") == EXIT_OK
    rows = read_rows(tmp_path / "rates.csv")
    assert [r["variant"] for r in rows] == ["none", "learned"]
    for r in rows:
        assert 0 <= float(r["rate_pct"]) <= 100
        assert float(r["ci_low_pct"]) <= float(r["rate_pct"]) <= float(r["ci_high_pct"])
        assert int(r["episodes"]) == 6
    none, learned = read_rows(tmp_path / "episodes_none.csv"), read_rows(tmp_path / "episodes_learned.csv")
    assert [r["seed"] for r in none] == [r["seed"] for r in learned]


def test_grid_files_and_straight_corridor(tmp_path):
    assert run("grid", tmp_path, "barrier=exact-straight", "grid_n=81") == EXIT_OK
    files = sorted(tmp_path.glob("grid_exact-straight_*.csv"))
    assert [f.name for f in files] == [f"grid_exact-straight_{h}.csv" for h in ("down", "left", "right", "up")]
    for f in files:
        rows = read_rows(f)
        assert len(rows) == 6561 and list(rows[0]) == ["x", "y", "h", "unsafe"]
    left = read_rows(tmp_path / "grid_exact-straight_left.csv")
    corridor = [r for r in left if float(r["y"]) == 0.0 and float(r["x"]) > 0]
    assert len(corridor) == 40
    assert all(r["unsafe"] == "1" for r in corridor)
    assert run("grid", tmp_path, "barrier=none") == EXIT_INVALID


def test_scenario_outputs(tmp_path):
    assert run("scenario", tmp_path, "scenario=pass_left", "gap=100", "barrier=exact-turn", "T=200",
               "barrier_horizon=300") == EXIT_OK
    ep = read_rows(tmp_path / "episode.csv")[0]
    assert int(ep["override_count"]) > 0
    assert len(read_rows(tmp_path / "trajectory.csv")) == 201
    assert run("scenario", tmp_path, "scenario=loop") == EXIT_INVALID


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mfbf.cli", "generate", "--out", str(tmp_path), "--set", "lam=2"],
                         capture_output=True, text=True)
    assert res.returncode == EXIT_INVALID
    res = subprocess.run([sys.executable, "-m", "mfbf.cli", "scenario", "--out", str(tmp_path), "--set", "T=50"],
                         capture_output=True, text=True)
    assert res.returncode == EXIT_OK
    assert res.stdout.strip().endswith("episode.csv")
    assert np.isfinite(float(read_rows(tmp_path / "episode.csv")[0]["min_distance"]))
