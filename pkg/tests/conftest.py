"""Shared fixtures: the expensive training runs used by several acceptance
criteria happen once per session.

Setting UUBRL_TEST_CACHE=<dir> caches trained agents between sessions
(development convenience only; leave it unset for a real acceptance run).
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest

from uubrl import config as config_mod
from uubrl import lcpo as lcpo_mod
from uubrl import lsac as lsac_mod
from uubrl.envs import make_env
from uubrl.runlog import RunLog


def _cache_path(tag: str, doc: dict) -> str | None:
    root = os.environ.get("UUBRL_TEST_CACHE")
    if not root:
        return None
    os.makedirs(root, exist_ok=True)
    digest = hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
    return os.path.join(root, f"{tag}_{digest}.json")


def _build_env(cfg):
    params = dict(cfg.env_params)
    params.pop("eta", None)
    params.pop("safety_budget_d", None)
    return make_env(cfg.env, **params)


def train_lsac_run(cfg, seed: int, tag: str):
    """Train (or load from the dev cache) one LSAC run; returns
    (agent, RunLog)."""
    doc = {"cfg": cfg.to_dict(), "seed": seed}
    path = _cache_path(tag, doc)
    env = _build_env(cfg)
    if path and os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
        agent = lsac_mod.agent_from_dict(blob["agent"], cfg.lsac, np.random.default_rng(seed))
        log = RunLog(tuple(blob["columns"]), [tuple(r) for r in blob["rows"]])
        return agent, log, blob.get("minutes", 0.0)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    agent = lsac_mod.make_lsac_agent(env, cfg.lsac, rng)
    t0 = time.time()
    log = lsac_mod.train(agent, env, seed)
    minutes = (time.time() - t0) / 60
    print(f"[fixture] {tag} seed {seed}: {len(log)} episodes in {minutes:.1f} min")
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {"agent": lsac_mod.agent_to_dict(agent), "columns": log.columns,
                 "rows": log.rows, "minutes": minutes},
                fh,
            )
    return agent, log, minutes


def train_lcpo_run(cfg, seed: int, tag: str):
    doc = {"cfg": cfg.to_dict(), "seed": seed}
    path = _cache_path(tag, doc)
    env = _build_env(cfg)
    if path and os.path.exists(path):
        with open(path, "r", encoding="utf-8") as fh:
            blob = json.load(fh)
        agent = lcpo_mod.agent_from_dict(blob["agent"], cfg.lcpo, np.random.default_rng(seed))
        log = RunLog(tuple(blob["columns"]), [tuple(r) for r in blob["rows"]])
        return agent, log, blob.get("minutes", 0.0)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    agent = lcpo_mod.make_lcpo_agent(env, cfg.lcpo, rng)
    t0 = time.time()
    log = lcpo_mod.train(agent, env, seed)
    minutes = (time.time() - t0) / 60
    print(f"[fixture] {tag} seed {seed}: {len(log)} iterations in {minutes:.1f} min")
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {"agent": lcpo_mod.agent_to_dict(agent), "columns": log.columns,
                 "rows": log.rows, "minutes": minutes},
                fh,
            )
    return agent, log, minutes


def cartpole_desk_config(seed: int):
    return config_mod.make_config("lsac", "cartpole_safe", preset="desk", seed=seed)


@pytest.fixture(scope="session")
def lsac_cartpole_runs():
    """Three desk-scale CartPole runs at the published table defaults."""
    runs = []
    for seed in (0, 1, 2):
        cfg = cartpole_desk_config(seed)
        agent, log, minutes = train_lsac_run(cfg, seed, "lsac_cartpole")
        runs.append((seed, cfg, agent, log, minutes))
    return runs


@pytest.fixture(scope="session")
def lsac_cartpole_unconstrained():
    """Ablation twin for the recovery study: safety multiplier frozen at zero."""
    cfg = cartpole_desk_config(0)
    cfg.lsac.freeze_lambda = True
    cfg.lsac.lambda_init = 1e-12
    cfg.lsac.total_env_steps = 60_000
    agent, log, _ = train_lsac_run(cfg, 0, "lsac_cartpole_nolambda")
    return cfg, agent, log


@pytest.fixture(scope="session")
def lsac_pointcircle_run():
    cfg = config_mod.make_config("lsac", "point_circle", preset="desk", seed=0)
    agent, log, minutes = train_lsac_run(cfg, 0, "lsac_pointcircle")
    return cfg, agent, log, minutes


@pytest.fixture(scope="session")
def lcpo_pointcircle_run():
    cfg = config_mod.make_config("lcpo", "point_circle", preset="desk", seed=0)
    agent, log, minutes = train_lcpo_run(cfg, 0, "lcpo_pointcircle")
    return cfg, agent, log, minutes
