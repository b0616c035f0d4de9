import json
import os
import subprocess
import sys

import numpy as np
import pytest

from uubrl import config as config_mod
from uubrl.config import ConfigError, RunConfig, config_from_dict, load_config, make_config
from uubrl.runlog import RunLog


def run_cli(args, env_extra=None):
    env = dict(os.environ)
    if env_extra:
        env.update(env_extra)
    return subprocess.run(
        [sys.executable, "-m", "uubrl.cli", *args],
        capture_output=True,
        text=True,
        env=env,
    )


def tiny_train_config(tmp_path, seed=0, algorithm="lsac"):
    cfg = make_config(algorithm, "point_circle", preset="desk", seed=seed)
    cfg.env_params["episode_length"] = 15
    cfg.lsac.hidden_sizes = (8,)
    cfg.lsac.total_env_steps = 150
    cfg.lsac.warmup_steps = 40
    cfg.lsac.update_after = 60
    cfg.lsac.batch_size = 16
    cfg.lsac.eval_interval_episodes = 4
    cfg.lsac.uub_check_episodes = 2
    cfg.lsac.uub_n_action_samples = 2
    cfg.lcpo.policy_hidden = (6,)
    cfg.lcpo.value_hidden = (8,)
    cfg.lcpo.lyapunov_hidden = (8,)
    cfg.lcpo.batch_size = 45
    cfg.lcpo.rollout_len = 15
    cfg.lcpo.n_iterations = 2
    cfg.lcpo.value_epochs = 1
    cfg.lcpo.lyapunov_epochs = 1
    cfg.lcpo.fvp_subsample = 32
    cfg.uub.n_episodes = 4
    cfg.uub.n_action_samples = 2
    cfg.out_dir = str(tmp_path / "out")
    path = tmp_path / "cfg.json"
    config_mod.save_config(cfg, str(path))
    return cfg, str(path)


# -- config round trips -----------------------------------------------------------


def test_config_round_trip_identity(tmp_path):
    cfg = make_config("lsac", "cartpole_safe", preset="desk", seed=3)
    path = tmp_path / "c.json"
    config_mod.save_config(cfg, str(path))
    reloaded = load_config(str(path))
    assert reloaded.to_dict() == cfg.to_dict()
    config_mod.save_config(reloaded, str(tmp_path / "c2.json"))
    assert (tmp_path / "c.json").read_text() == (tmp_path / "c2.json").read_text()


def test_config_missing_field_named():
    with pytest.raises(ConfigError, match="algorithm"):
        config_from_dict({"env": "cartpole_safe"})


def test_config_unknown_key_rejected():
    doc = make_config("lsac", "cartpole_safe").to_dict()
    doc["lsac"]["no_such_knob"] = 1
    with pytest.raises(ConfigError, match="no_such_knob"):
        config_from_dict(doc)


def test_config_bad_json_line_anchored(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "algorithm": "lsac",\n broken\n}')
    with pytest.raises(ConfigError, match=r":3:"):
        load_config(str(path))


def test_env_override_applies():
    doc = make_config("lsac", "point_circle").to_dict()
    config_mod.apply_env_overrides(
        doc, {"UUBRL_SEED": "9", "UUBRL_LSAC__TOTAL_ENV_STEPS": "123"}
    )
    cfg = config_from_dict(doc)
    assert cfg.seed == 9
    assert cfg.lsac.total_env_steps == 123


def test_make_config_table_values():
    cfg = make_config("lsac", "cartpole_safe", preset="paper")
    assert cfg.lsac.lyapunov_candidate == "value"
    assert cfg.lsac.target_entropy == -1.0
    assert cfg.lsac.alpha3 == 1.0
    assert cfg.lsac.batch_size == 256
    assert cfg.lsac.actor_lr == 1e-4
    assert cfg.lsac.critic_lr == 3e-4
    assert cfg.lsac.tau == 0.005
    assert cfg.lsac.gamma == 0.99
    assert cfg.lsac.hidden_sizes == (256, 256)
    pc = make_config("lsac", "point_circle")
    assert pc.lsac.lyapunov_candidate == "cost"
    assert pc.lsac.target_entropy == -2.0
    assert pc.lsac.alpha3 == 0.8
    lc = make_config("lcpo", "point_circle", preset="paper")
    assert lc.lcpo.batch_size == 10_000
    assert lc.lcpo.rollout_len == 500
    assert lc.lcpo.alpha3 == 0.2
    assert lc.lcpo.delta == 0.01
    assert lc.lcpo.gamma == 0.99
    assert lc.lcpo.value_lr == 1e-4
    assert lc.lcpo.lyapunov_lr == 1e-4
    assert lc.lcpo.safety_budget_d == 10.0
    assert lc.lcpo.safety_discount is None


# -- runlog ------------------------------------------------------------------------


def test_runlog_csv_round_trip(tmp_path):
    log = RunLog(("iteration", "value"))
    log.append(iteration=1, value=0.5)
    log.append(iteration=2, value=float("nan"))
    path = tmp_path / "log.csv"
    log.to_csv(str(path))
    loaded = RunLog.from_csv(str(path))
    assert loaded.columns == ("iteration", "value")
    assert loaded.rows[0] == (1, 0.5)
    assert np.isnan(loaded.rows[1][1])


def test_runlog_rejects_mismatched_row():
    log = RunLog(("a", "b"))
    with pytest.raises(ValueError):
        log.append(a=1)


# -- CLI end to end -----------------------------------------------------------------


def test_cli_train_writes_artifacts(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    result = run_cli(["train", path])
    assert result.returncode == 0, result.stderr
    out = tmp_path / "out"
    assert (out / "runlog.csv").exists()
    assert (out / "checkpoint.json").exists()
    assert (out / "uub_report.json").exists()
    assert (out / "config.json").exists()


def test_cli_train_max_iterations_zero(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    result = run_cli(["train", path, "--max-iterations", "0"])
    assert result.returncode == 0, result.stderr
    log = RunLog.from_csv(str(tmp_path / "out" / "runlog.csv"))
    assert len(log.rows) == 0


def test_cli_train_byte_identical_rerun(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    r1 = run_cli(["train", path, "--out", str(tmp_path / "a")])
    r2 = run_cli(["train", path, "--out", str(tmp_path / "b")])
    assert r1.returncode == 0 and r2.returncode == 0
    for name in ("runlog.csv", "uub_report.json", "checkpoint.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_train_missing_field_usage_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text(json.dumps({"env": "point_circle"}))
    result = run_cli(["train", str(path)])
    assert result.returncode == 1
    assert "algorithm" in result.stderr


def test_cli_train_lcpo(tmp_path):
    cfg, path = tiny_train_config(tmp_path, algorithm="lcpo")
    result = run_cli(["train", path])
    assert result.returncode == 0, result.stderr
    log = RunLog.from_csv(str(tmp_path / "out" / "runlog.csv"))
    assert len(log.rows) == 2
    assert "feasible" in log.columns


def test_cli_verify_and_recover_roundtrip(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    assert run_cli(["train", path]).returncode == 0
    ckpt = str(tmp_path / "out" / "checkpoint.json")

    verify = run_cli(["verify", ckpt, path, "--out", str(tmp_path / "v")])
    assert verify.returncode in (0, 3)
    report = json.loads((tmp_path / "v" / "uub_report.json").read_text())
    assert (verify.returncode == 0) == report["certified"]

    recover = run_cli(
        ["recover", ckpt, path, "--magnitudes", "0,5", "--episodes", "5",
         "--out", str(tmp_path / "r")]
    )
    assert recover.returncode == 0, recover.stderr
    rec = RunLog.from_csv(str(tmp_path / "r" / "recovery.csv"))
    assert len(rec.rows) == 2
    assert rec.columns == ("magnitude", "episodes", "recovered", "rate", "ci_low", "ci_high")


def test_cli_recover_empty_magnitudes_usage_error(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    assert run_cli(["train", path]).returncode == 0
    ckpt = str(tmp_path / "out" / "checkpoint.json")
    result = run_cli(["recover", ckpt, path, "--magnitudes", ""])
    assert result.returncode == 1


def test_cli_verify_corrupt_checkpoint(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    result = run_cli(["verify", str(bad), path])
    assert result.returncode == 2


def test_cli_verify_mismatched_env(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    assert run_cli(["train", path]).returncode == 0
    ckpt = str(tmp_path / "out" / "checkpoint.json")
    cfg2 = make_config("lsac", "cartpole_safe", preset="desk")
    cfg2.uub.n_episodes = 2
    path2 = tmp_path / "cfg2.json"
    config_mod.save_config(cfg2, str(path2))
    result = run_cli(["verify", ckpt, str(path2)])
    assert result.returncode == 2
    assert "match" in result.stderr


def test_cli_eval_runs(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    assert run_cli(["train", path]).returncode == 0
    ckpt = str(tmp_path / "out" / "checkpoint.json")
    result = run_cli(["eval", ckpt, path, "--episodes", "2"])
    assert result.returncode == 0
    assert "return" in result.stdout


def test_cli_env_var_override(tmp_path):
    cfg, path = tiny_train_config(tmp_path)
    result = run_cli(
        ["train", path, "--out", str(tmp_path / "e")],
        env_extra={"UUBRL_LSAC__TOTAL_ENV_STEPS": "45"},
    )
    assert result.returncode == 0, result.stderr
    log = RunLog.from_csv(str(tmp_path / "e" / "runlog.csv"))
    assert len(log.rows) == 3  # 45 steps / 15-step episodes
