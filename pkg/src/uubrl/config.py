"""Run configuration: a JSON document that fully determines a run.

Presets exist at two scales per task: "paper" carries the published
hyperparameters (wide networks, long budgets), "desk" keeps every published
table value but shrinks what the tables do not pin (network width, step
budgets) so a run finishes on one workstation core.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import asdict, dataclass, field

from .lcpo import LcpoConfig
from .lsac import LsacConfig
from .uub_verify import UubConfig

SCHEMA_VERSION = 1
ENV_PREFIX = "UUBRL_"

ALGORITHMS = ("lsac", "lcpo")
ENVIRONMENTS = ("cartpole_safe", "point_circle", "quadrotor_safe")
PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass
class RunConfig:
    algorithm: str
    env: str
    seed: int = 0
    out_dir: str = "runs/out"
    schema_version: int = SCHEMA_VERSION
    checkpoint_interval: int = 0  # episodes/iterations between checkpoints; 0 = final only
    env_params: dict = field(default_factory=dict)
    lsac: LsacConfig = field(default_factory=LsacConfig)
    lcpo: LcpoConfig = field(default_factory=LcpoConfig)
    uub: UubConfig = field(default_factory=UubConfig)

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"field 'algorithm' must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"field 'env' must be one of {ENVIRONMENTS}, got {self.env!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_REQUIRED = ("algorithm", "env")
_SECTIONS = {"lsac": LsacConfig, "lcpo": LcpoConfig, "uub": UubConfig}


def _build_section(cls, doc: dict, name: str):
    allowed = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{name}': {sorted(unknown)}")
    coerced = {}
    for key, value in doc.items():
        if isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return cls(**coerced)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration document must be a JSON object")
    for name in _REQUIRED:
        if name not in doc:
            raise ConfigError(f"missing required field '{name}'")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r}")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(doc) - top_fields
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {k: v for k, v in doc.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(cls, doc.get(name, {}), name)
    return RunConfig(**kwargs)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json())
        fh.write("\n")


def apply_env_overrides(doc: dict, environ=None) -> dict:
    """CI override hook: UUBRL_SEED=3, UUBRL_LSAC__TOTAL_ENV_STEPS=2000, ...

    Double underscores descend into sections; values parse as JSON literals
    with a plain-string fallback.
    """
    environ = os.environ if environ is None else environ
    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX) :].lower().split("__")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    return doc


# ---------------------------------------------------------------------------
# presets

_LSAC_TABLE = {
    # candidate, target entropy, alpha3
    "cartpole_safe": ("value", -1.0, 1.0),
    "point_circle": ("cost", -2.0, 0.8),
    "quadrotor_safe": ("value", -6.0, 0.8),
}

_ENV_DEFAULTS = {
    # eta sits just above each task's cost hinge so the edge set covers
    # nearly the whole nonzero-cost band
    "cartpole_safe": {"episode_length": 250, "eta": 0.001, "safety_budget_d": 10.0},
    "point_circle": {"episode_length": 65, "eta": 0.05, "safety_budget_d": 10.0},
    "quadrotor_safe": {"episode_length": 2000, "eta": 0.5, "safety_budget_d": 10.0},
}

_DESK_LSAC_STEPS = {"cartpole_safe": 150_000, "point_circle": 60_000, "quadrotor_safe": 60_000}


def make_config(algorithm: str, env: str, preset: str = "desk", seed: int = 0) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset '{preset}'")
    if env not in ENVIRONMENTS:
        raise ConfigError(f"field 'env' must be one of {ENVIRONMENTS}, got {env!r}")
    env_params = dict(_ENV_DEFAULTS[env])
    if preset == "desk" and env == "quadrotor_safe":
        env_params["episode_length"] = 400

    candidate, target_entropy, alpha3_lsac = _LSAC_TABLE[env]
    lsac = LsacConfig(
        hidden_sizes=(256, 256) if preset == "paper" else (64, 64),
        lyapunov_candidate=candidate,
        target_entropy=target_entropy,
        alpha3=alpha3_lsac,
        eta=env_params["eta"],
        total_env_steps=1_000_000 if preset == "paper" else _DESK_LSAC_STEPS[env],
        reward_scale=0.002 if env == "cartpole_safe" else 1.0,
        multiplier_lr=3e-4,
        edge_buffer_capacity=10_000 if preset == "desk" else 100_000,
    )
    lcpo = LcpoConfig(eta=env_params["eta"])
    if preset == "desk":
        lcpo.policy_hidden = (64, 32)
        lcpo.value_hidden = (64, 64)
        lcpo.lyapunov_hidden = (64, 64)
        lcpo.batch_size = 2_600 if env == "point_circle" else 4_000
        lcpo.rollout_len = env_params["episode_length"]
        lcpo.n_iterations = 60
        lcpo.value_lr = 1e-3
        lcpo.lyapunov_lr = 1e-3
    uub = UubConfig(
        alpha3=lsac.alpha3 if algorithm == "lsac" else lcpo.alpha3,
        eta=env_params["eta"],
        safety_budget_d=env_params["safety_budget_d"],
        n_episodes=200 if preset == "desk" else 500,
    )
    return RunConfig(
        algorithm=algorithm,
        env=env,
        seed=seed,
        out_dir=f"runs/{algorithm}_{env}_{preset}",
        env_params=env_params,
        lsac=lsac,
        lcpo=lcpo,
        uub=uub,
    )
