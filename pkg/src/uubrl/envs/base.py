"""Shared environment machinery: step records, configs, impulsive disturbances.

Every task exposes deterministic dynamics (state, action, seed fully determine
the next state), a non-negative state-dependent constraint cost, and a reward.
Reward and cost in a StepResult are evaluated at the state where the action
was taken; the constraint cost of the successor lands in info["next_cost"].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..nets import Array, NumericsError


@dataclass
class StepResult:
    next_state: Array
    reward: float
    constraint_cost: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class Disturbance:
    """An impulsive force applied exactly once per episode.

    step_index is 1-based in episode time; None means the next step.
    """

    magnitude: float
    step_index: int | None = None
    direction: Array | None = None


class SafeEnv:
    """Base class for the built-in tasks. Subclasses fill in the physics."""

    state_dim: int
    action_dim: int
    action_low: Array
    action_high: Array
    episode_length: int

    def __init__(self, episode_length: int, seed: int | None = None):
        self.episode_length = episode_length
        self._rng = np.random.default_rng(seed)
        self._t = 0
        self._state: Array | None = None
        self._pending: Disturbance | None = None

    # -- subclass hooks -------------------------------------------------
    def _initial_state(self) -> Array:
        raise NotImplementedError

    def _integrate(self, state: Array, action: Array, kick: Array | None) -> Array:
        raise NotImplementedError

    def _exit(self, state: Array) -> bool:
        """True when the state leaves the operating region (hard episode end)."""
        return False

    def reward(self, state: Array) -> float:
        raise NotImplementedError

    def constraint_cost(self, state: Array) -> float:
        raise NotImplementedError

    # -- common driver ---------------------------------------------------
    def reset(self, seed: int | None = None) -> Array:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._t = 0
        self._pending = None
        self._state = self._initial_state()
        return self._state.copy()

    def apply_disturbance(self, d: Disturbance) -> None:
        if self._state is None:
            raise RuntimeError("apply_disturbance called before reset")
        self._pending = d

    def _take_kick(self) -> Array | None:
        """Called after the step counter advances, so self._t is the 1-based
        index of the step being integrated."""
        if self._pending is None:
            return None
        d = self._pending
        if d.step_index is not None and d.step_index != self._t:
            return None
        self._pending = None
        direction = d.direction if d.direction is not None else self._default_push_direction()
        return float(d.magnitude) * np.asarray(direction, dtype=float)

    def _default_push_direction(self) -> Array:
        raise NotImplementedError

    def step(self, action: Array) -> StepResult:
        if self._state is None:
            raise RuntimeError("step called before reset")
        state = self._state
        if not np.all(np.isfinite(state)):
            raise NumericsError("environment state became non-finite")
        action = np.clip(np.asarray(action, dtype=float), self.action_low, self.action_high)
        self._t += 1
        reward = self.reward(state)
        cost = self.constraint_cost(state)
        next_state = self._integrate(state, action, self._take_kick())
        exited = self._exit(next_state) or not np.all(np.isfinite(next_state))
        timeout = self._t >= self.episode_length
        done = exited or timeout
        self._state = next_state
        return StepResult(
            next_state=next_state.copy(),
            reward=float(reward),
            constraint_cost=float(cost),
            done=done,
            info={
                "t": self._t,
                "timeout": timeout and not exited,
                "exit": exited,
                "next_cost": float(self.constraint_cost(next_state)),
            },
        )
