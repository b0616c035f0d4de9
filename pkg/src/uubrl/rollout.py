"""Episode collection shared by the trainers and the verifier."""

from __future__ import annotations

import numpy as np

from . import policy as policy_mod
from .buffers import Transition
from .envs.base import SafeEnv
from .policy import SquashedGaussianPolicy


def rollout_episode(
    env: SafeEnv,
    policy: SquashedGaussianPolicy | None,
    rng: np.random.Generator,
    deterministic: bool = False,
    random_actions: bool = False,
    max_steps: int | None = None,
    reset: bool = True,
) -> list[Transition]:
    """Run one episode and return its transitions in time order.

    Transition.done records true environment termination only; episodes that
    merely hit the step budget stay bootstrappable. Pass reset=False to roll
    an environment that was prepared by the caller (e.g. with a pending
    disturbance).
    """
    state = env.reset() if reset else env._state.copy()
    transitions: list[Transition] = []
    steps = max_steps if max_steps is not None else env.episode_length
    for _ in range(steps):
        if random_actions or policy is None:
            action = rng.uniform(env.action_low, env.action_high)
        elif deterministic:
            action = policy_mod.mean_action(policy, state)
        else:
            noise = rng.standard_normal(policy.action_dim)
            action = policy_mod.sample(policy, state, noise).action
        result = env.step(action)
        transitions.append(
            Transition(
                state=state.copy(),
                action=np.asarray(action, dtype=float).copy(),
                reward=result.reward,
                cost=result.constraint_cost,
                next_state=result.next_state.copy(),
                done=bool(result.info.get("exit", result.done)),
                next_cost=float(result.info.get("next_cost", 0.0)),
                next_reward=float(env.reward(result.next_state)),
            )
        )
        state = result.next_state
        if result.done:
            break
    return transitions


def episode_return(transitions: list[Transition]) -> float:
    return float(sum(tr.reward for tr in transitions))


def episode_cost(transitions: list[Transition]) -> float:
    return float(sum(tr.cost for tr in transitions))


def episode_violations(transitions: list[Transition]) -> int:
    return int(sum(1 for tr in transitions if tr.cost > 0.0))
