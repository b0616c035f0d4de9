"""Command-line front end: train / verify / recover / eval.

Exit codes: 0 success (verify: certified), 1 usage or configuration error,
2 runtime abort, 3 verification ran but the certificate was withheld.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as config_mod
from . import lcpo as lcpo_mod
from . import lsac as lsac_mod
from . import lyapunov as lyap_mod
from . import rollout as rollout_mod
from . import uub_verify
from .config import ConfigError, RunConfig
from .envs import make_env
from .nets import NumericsError
from .runlog import RunLog

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_NOT_CERTIFIED = 3


def _resolve_config(args) -> RunConfig:
    if args.config:
        doc = config_mod.load_config(args.config).to_dict()
    elif args.preset:
        if not (args.algorithm and args.env):
            raise ConfigError("--preset without a config file needs --algorithm and --env")
        doc = config_mod.make_config(args.algorithm, args.env, args.preset).to_dict()
    else:
        raise ConfigError("provide a config file or --preset with --algorithm/--env")
    config_mod.apply_env_overrides(doc)
    cfg = config_mod.config_from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "max_iterations", None) is not None:
        cfg.lsac.max_iterations = args.max_iterations
        cfg.lcpo.n_iterations = args.max_iterations
    return cfg


def _build_env(cfg: RunConfig):
    params = dict(cfg.env_params)
    params.pop("eta", None)
    params.pop("safety_budget_d", None)
    return make_env(cfg.env, **params)


def _wire_eta(cfg: RunConfig) -> None:
    # the environment section owns the edge threshold and budget
    eta = cfg.env_params.get("eta")
    if eta is not None:
        cfg.lsac.eta = eta
        cfg.lcpo.eta = eta
        cfg.uub.eta = eta
    d = cfg.env_params.get("safety_budget_d")
    if d is not None:
        cfg.lcpo.safety_budget_d = d
        cfg.uub.safety_budget_d = d


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    _wire_eta(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    config_mod.save_config(cfg, os.path.join(cfg.out_dir, "config.json"))
    env = _build_env(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    if cfg.algorithm == "lsac":
        agent = lsac_mod.make_lsac_agent(env, cfg.lsac, rng)
        log = lsac_mod.train(agent, env, cfg.seed)
        checkpoint = lsac_mod.agent_to_dict(agent)
        policy, lyap = agent.policy, agent.lyapunov
    else:
        agent = lcpo_mod.make_lcpo_agent(env, cfg.lcpo, rng)
        log = lcpo_mod.train(agent, env, cfg.seed)
        checkpoint = lcpo_mod.agent_to_dict(agent)
        policy, lyap = agent.policy, agent.lyapunov
    checkpoint["env"] = cfg.env
    log.to_csv(os.path.join(cfg.out_dir, "runlog.csv"))
    with open(os.path.join(cfg.out_dir, "checkpoint.json"), "w", encoding="utf-8") as fh:
        json.dump(checkpoint, fh)
    report = _verify(cfg, policy, lyap)
    with open(os.path.join(cfg.out_dir, "uub_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    print(f"run complete: {len(log)} iterations -> {cfg.out_dir}")
    print(f"certified: {report.certified} (vacuous: {report.vacuous})")
    return EXIT_OK


def _verify(cfg: RunConfig, policy, lyap) -> uub_verify.UubReport:
    env = _build_env(cfg)
    seq = np.random.SeedSequence(cfg.seed + 7_777)
    s_roll, s_lyap, s_b = seq.spawn(3)
    env.reset(seed=int(s_roll.generate_state(1)[0] % 2**31))
    rng = np.random.default_rng(s_roll)
    lyap_fn = lyap_mod.make_lyapunov_fn(
        lyap, policy, cfg.uub.n_action_samples, np.random.default_rng(s_lyap)
    )
    episodes = uub_verify._collect_episodes(policy, env, cfg.uub.n_episodes, rng)
    decrease = uub_verify.check_decrease(policy, lyap_fn, env, cfg.uub, rng, episodes=episodes)
    sandwich = uub_verify.check_sandwich(policy, lyap_fn, env, cfg.uub, rng, episodes=episodes)
    b = cfg.uub.b
    if b is None:
        b_env = _build_env(cfg)
        b_env.reset(seed=int(s_b.generate_state(1)[0] % 2**31))
        b = uub_verify.estimate_b(b_env, cfg.uub, np.random.default_rng(s_b))
    return uub_verify.bound_report(cfg.uub, decrease, sandwich, b)


def _load_checkpoint(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeError(f"cannot read checkpoint {path}: {exc}") from exc
    if "algorithm" not in doc or "policy" not in doc:
        raise RuntimeError(f"checkpoint {path} is missing required sections")
    return doc


def _policy_and_lyapunov(doc: dict, cfg: RunConfig):
    from . import policy as policy_mod

    policy = policy_mod.policy_from_dict(doc["policy"])
    lyap = lyap_mod.critic_from_dict(doc["lyapunov"])
    env = _build_env(cfg)
    if policy.state_dim != env.state_dim or policy.action_dim != env.action_dim:
        raise RuntimeError(
            f"checkpoint dimensions ({policy.state_dim}, {policy.action_dim}) do not match "
            f"environment '{cfg.env}' ({env.state_dim}, {env.action_dim})"
        )
    return policy, lyap


def cmd_verify(args) -> int:
    cfg = _resolve_config(args)
    _wire_eta(cfg)
    doc = _load_checkpoint(args.checkpoint)
    policy, lyap = _policy_and_lyapunov(doc, cfg)
    report = _verify(cfg, policy, lyap)
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "uub_report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    print(report.to_json())
    return EXIT_OK if report.certified else EXIT_NOT_CERTIFIED


def cmd_recover(args) -> int:
    cfg = _resolve_config(args)
    _wire_eta(cfg)
    magnitudes = [float(m) for m in args.magnitudes.split(",") if m.strip() != ""]
    if not magnitudes:
        raise ConfigError("--magnitudes must list at least one value")
    doc = _load_checkpoint(args.checkpoint)
    policy, _ = _policy_and_lyapunov(doc, cfg)
    env = _build_env(cfg)
    seq = np.random.SeedSequence(cfg.seed + 13_131)
    env.reset(seed=int(seq.generate_state(1)[0] % 2**31))
    rows = uub_verify.recovery_rate(
        policy, env, magnitudes, args.episodes, cfg.uub, np.random.default_rng(seq)
    )
    os.makedirs(cfg.out_dir, exist_ok=True)
    out_path = os.path.join(cfg.out_dir, "recovery.csv")
    log = RunLog(("magnitude", "episodes", "recovered", "rate", "ci_low", "ci_high"))
    for row in rows:
        log.append(
            magnitude=row.magnitude,
            episodes=row.episodes,
            recovered=row.recovered,
            rate=row.rate,
            ci_low=row.ci_low,
            ci_high=row.ci_high,
        )
    log.to_csv(out_path)
    for row in rows:
        print(f"magnitude {row.magnitude:g}: rate {row.rate:.3f} [{row.ci_low:.3f}, {row.ci_high:.3f}]")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    _wire_eta(cfg)
    doc = _load_checkpoint(args.checkpoint)
    policy, _ = _policy_and_lyapunov(doc, cfg)
    env = _build_env(cfg)
    seq = np.random.SeedSequence(cfg.seed + 99_999)
    env.reset(seed=int(seq.generate_state(1)[0] % 2**31))
    rng = np.random.default_rng(seq)
    returns, costs, violations = [], [], []
    for _ in range(args.episodes):
        traj = rollout_mod.rollout_episode(env, policy, rng, deterministic=args.deterministic)
        returns.append(rollout_mod.episode_return(traj))
        costs.append(rollout_mod.episode_cost(traj))
        violations.append(rollout_mod.episode_violations(traj))
    print(
        f"episodes {args.episodes}: return {np.mean(returns):.2f} "
        f"cost {np.mean(costs):.4f} violations {np.mean(violations):.2f}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uubrl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_checkpoint=False):
        if with_checkpoint:
            p.add_argument("checkpoint", help="checkpoint JSON file")
        p.add_argument("config", nargs="?", default=None, help="run configuration (JSON)")
        p.add_argument("--config", dest="config_flag", default=None, help="run configuration (JSON)")
        p.add_argument("--preset", choices=config_mod.PRESETS, default=None)
        p.add_argument("--algorithm", choices=config_mod.ALGORITHMS, default=None)
        p.add_argument("--env", choices=config_mod.ENVIRONMENTS, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)

    p_train = sub.add_parser("train", help="train an agent and write run artifacts")
    add_common(p_train)
    p_train.add_argument("--max-iterations", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_verify = sub.add_parser("verify", help="verify the boundedness certificate of a checkpoint")
    add_common(p_verify, with_checkpoint=True)
    p_verify.set_defaults(func=cmd_verify)

    p_recover = sub.add_parser("recover", help="disturbance recovery-rate experiment")
    add_common(p_recover, with_checkpoint=True)
    p_recover.add_argument("--magnitudes", required=True, help="comma-separated impulse magnitudes")
    p_recover.add_argument("--episodes", type=int, default=100)
    p_recover.set_defaults(func=cmd_recover)

    p_eval = sub.add_parser("eval", help="roll evaluation episodes from a checkpoint")
    add_common(p_eval, with_checkpoint=True)
    p_eval.add_argument("--episodes", type=int, default=10)
    p_eval.add_argument("--deterministic", action="store_true")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config_flag", None) and not args.config:
        args.config = args.config_flag
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericsError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
