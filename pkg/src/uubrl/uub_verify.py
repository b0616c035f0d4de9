"""Monte-Carlo verification of the ultimate-boundedness conditions.

Given a frozen policy, a Lyapunov state function, and an environment, the
checks roll fresh episodes, extract the per-episode edge prefixes with the
same rule the training buffers use, and estimate both sides of the decrease
inequality together with the sandwich condition. The certificate demands the
decrease with a two-standard-error margin, a capped sandwich violation rate,
and an ultimate bound below the safety budget.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rollout as rollout_mod
from .buffers import Transition, edge_prefix_length
from .envs.base import Disturbance, SafeEnv
from .nets import Array
from .policy import SquashedGaussianPolicy


@dataclass
class UubConfig:
    alpha1: float = 0.5
    alpha2: float = 2.0
    alpha3: float = 1.0
    eta: float = 0.01
    b: float | None = None  # None: estimated from initial states
    safety_budget_d: float = 10.0
    n_episodes: int = 200
    n_action_samples: int = 16
    sandwich_violation_cap: float = 0.05
    estimator: str = "transition"  # or "episode"

    def __post_init__(self) -> None:
        if self.alpha1 > self.alpha2:
            raise ValueError("alpha1 must not exceed alpha2")
        if self.eta >= self.safety_budget_d:
            raise ValueError("eta must stay below the safety budget for a meaningful bound")


@dataclass
class DecreaseResult:
    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float
    residual_stderr: float
    n_samples: int
    episodes_touching_edge: int
    max_edge_exit_time: int
    vacuous: bool
    max_mean_cost_observed: float


@dataclass
class UubReport:
    decrease_lhs: float
    decrease_rhs: float
    decrease_stderr: float
    sandwich_violation_rate: float
    ultimate_bound: float
    max_mean_cost_observed: float
    certified: bool
    vacuous: bool
    episodes_touching_edge: int
    max_edge_exit_time: int
    alpha1: float
    alpha2: float
    alpha3: float
    eta: float
    b: float
    safety_budget_d: float
    n_episodes: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "UubReport":
        return cls(**json.loads(text))


def _collect_episodes(
    policy: SquashedGaussianPolicy, env: SafeEnv, n_episodes: int, rng: np.random.Generator
) -> list[list[Transition]]:
    return [rollout_mod.rollout_episode(env, policy, rng) for _ in range(n_episodes)]


def _max_mean_cost(episodes: list[list[Transition]]) -> float:
    max_len = max(len(ep) for ep in episodes)
    best = 0.0
    for t in range(max_len):
        costs = [ep[t].cost for ep in episodes if len(ep) > t]
        best = max(best, float(np.mean(costs)))
    return best


def check_decrease(
    policy: SquashedGaussianPolicy,
    lyapunov_fn,
    env: SafeEnv,
    cfg: UubConfig,
    rng: np.random.Generator,
    episodes: list[list[Transition]] | None = None,
) -> DecreaseResult:
    """Estimate both sides of the edge-set decrease condition on fresh rollouts.

    lyapunov_fn maps a batch of states to Lyapunov values. Episodes that never
    visit the edge set contribute nothing; when no episode does, the result is
    flagged vacuous.
    """
    if episodes is None:
        episodes = _collect_episodes(policy, env, cfg.n_episodes, rng)
    prefixes: list[list[Transition]] = []
    max_exit = 0
    for ep in episodes:
        flags = [tr.cost >= cfg.eta for tr in ep]
        n = edge_prefix_length(flags)
        if n > 0:
            prefixes.append(ep[:n])
            max_exit = max(max_exit, n)
    max_cost = _max_mean_cost(episodes)
    if not prefixes:
        return DecreaseResult(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, True, max_cost)

    flat = [tr for pre in prefixes for tr in pre]
    states = np.array([tr.state for tr in flat])
    next_states = np.array([tr.next_state for tr in flat])
    costs = np.array([tr.cost for tr in flat])
    in_edge = np.array([tr.cost >= cfg.eta for tr in flat], dtype=float)
    next_in_edge = np.array([tr.next_cost >= cfg.eta for tr in flat], dtype=float)
    l_curr = np.asarray(lyapunov_fn(states), dtype=float)
    l_next = np.asarray(lyapunov_fn(next_states), dtype=float)

    lhs_samples = l_next * next_in_edge - l_curr * in_edge
    rhs_samples = -cfg.alpha3 * costs * in_edge
    if cfg.estimator == "episode":
        bounds = np.cumsum([0] + [len(p) for p in prefixes])
        lhs_samples = np.array(
            [lhs_samples[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])]
        )
        rhs_samples = np.array(
            [rhs_samples[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])]
        )
    residual = lhs_samples - rhs_samples

    def stderr(x: Array) -> float:
        return float(x.std(ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0

    return DecreaseResult(
        lhs=float(lhs_samples.mean()),
        rhs=float(rhs_samples.mean()),
        lhs_stderr=stderr(lhs_samples),
        rhs_stderr=stderr(rhs_samples),
        residual_stderr=stderr(residual),
        n_samples=int(lhs_samples.size),
        episodes_touching_edge=len(prefixes),
        max_edge_exit_time=max_exit,
        vacuous=False,
        max_mean_cost_observed=max_cost,
    )


def check_sandwich(
    policy: SquashedGaussianPolicy,
    lyapunov_fn,
    env: SafeEnv,
    cfg: UubConfig,
    rng: np.random.Generator,
    episodes: list[list[Transition]] | None = None,
) -> float:
    """Fraction of visited states where alpha1*c <= L <= alpha2*c fails.

    The built-in tasks have state-determined constraint costs, so the
    per-state expected cost is read off exactly; only the Lyapunov side is
    a Monte-Carlo estimate.
    """
    if episodes is None:
        episodes = _collect_episodes(policy, env, cfg.n_episodes, rng)
    states = np.array([tr.state for ep in episodes for tr in ep])
    costs = np.array([tr.cost for ep in episodes for tr in ep])
    l_hat = np.asarray(lyapunov_fn(states), dtype=float)
    tol = 1e-12
    violations = (l_hat < cfg.alpha1 * costs - tol) | (l_hat > cfg.alpha2 * costs + tol)
    return float(np.mean(violations))


def estimate_b(env: SafeEnv, cfg: UubConfig, rng: np.random.Generator, n_draws: int = 1000) -> float:
    """95th percentile of the constraint cost over fresh initial states."""
    costs = []
    for _ in range(n_draws):
        state = env.reset()
        costs.append(env.constraint_cost(state))
    _ = rng
    return float(np.percentile(costs, 95.0))


@dataclass
class RecoveryRow:
    magnitude: float
    episodes: int
    recovered: int
    rate: float
    ci_low: float
    ci_high: float


def recovery_rate(
    policy: SquashedGaussianPolicy,
    env: SafeEnv,
    magnitudes: list[float],
    episodes_per_magnitude: int,
    cfg: UubConfig,
    rng: np.random.Generator,
    step_index: int = 20,
    direction: Array | None = None,
    deterministic: bool = False,
) -> list[RecoveryRow]:
    """Per-magnitude fraction of disturbed episodes that end safely.

    An episode counts as recovered when it runs to the full step budget and
    every state in its final 10% of steps lies in the inner set (cost below
    eta). Rates come with Wilson binomial intervals; no monotonicity in the
    magnitude is assumed or asserted.
    """
    from .testkit import wilson_interval

    tail = max(1, int(0.1 * env.episode_length))
    rows = []
    for mag in magnitudes:
        recovered = 0
        for _ in range(episodes_per_magnitude):
            env.reset()
            env.apply_disturbance(Disturbance(mag, step_index=step_index, direction=direction))
            traj = rollout_mod.rollout_episode(
                env, policy, rng, deterministic=deterministic, reset=False
            )
            full_length = len(traj) == env.episode_length
            safe_tail = all(tr.cost < cfg.eta for tr in traj[-tail:])
            if full_length and safe_tail:
                recovered += 1
        lo, hi = wilson_interval(recovered, episodes_per_magnitude)
        rows.append(
            RecoveryRow(
                magnitude=float(mag),
                episodes=episodes_per_magnitude,
                recovered=recovered,
                rate=recovered / episodes_per_magnitude,
                ci_low=lo,
                ci_high=hi,
            )
        )
    return rows


def bound_report(
    cfg: UubConfig,
    decrease: DecreaseResult,
    sandwich_violation_rate: float,
    b: float,
) -> UubReport:
    """Assemble the certificate from the two checks.

    Certification needs the ultimate bound below the budget and either real
    decrease evidence with a two-standard-error margin and an acceptable
    sandwich violation rate, or a vacuous run (the policy never reached the
    edge set, so the premise is empty and the flag says so).
    """
    ultimate_bound = cfg.alpha2 * b / cfg.alpha3 + cfg.eta
    bound_ok = ultimate_bound < cfg.safety_budget_d
    if decrease.vacuous:
        certified = bound_ok
    else:
        decrease_ok = decrease.lhs + 2.0 * decrease.residual_stderr < decrease.rhs
        sandwich_ok = sandwich_violation_rate <= cfg.sandwich_violation_cap
        certified = bound_ok and decrease_ok and sandwich_ok
    return UubReport(
        decrease_lhs=decrease.lhs,
        decrease_rhs=decrease.rhs,
        decrease_stderr=decrease.residual_stderr,
        sandwich_violation_rate=float(sandwich_violation_rate),
        ultimate_bound=float(ultimate_bound),
        max_mean_cost_observed=decrease.max_mean_cost_observed,
        certified=bool(certified),
        vacuous=decrease.vacuous,
        episodes_touching_edge=decrease.episodes_touching_edge,
        max_edge_exit_time=decrease.max_edge_exit_time,
        alpha1=cfg.alpha1,
        alpha2=cfg.alpha2,
        alpha3=cfg.alpha3,
        eta=cfg.eta,
        b=float(b),
        safety_budget_d=cfg.safety_budget_d,
        n_episodes=cfg.n_episodes,
    )
