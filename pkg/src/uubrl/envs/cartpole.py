"""Continuous-force cart-pole with an off-center target and a position limit.

The cart is rewarded for holding the pole upright at x = 6, which sits
outside the safe band: the constraint cost switches on past |x| = 3.2, so
the best safe behaviour is to balance at the edge of the band. Episodes end
when the cart leaves [0, 10] or after the step budget.
"""

from __future__ import annotations

import numpy as np

from ..nets import Array
from .base import SafeEnv

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
DT = 0.02
FORCE_LIMIT = 20.0


class CartPoleSafe(SafeEnv):
    state_dim = 4  # (x, x_dot, theta, theta_dot)
    action_dim = 1

    def __init__(
        self,
        episode_length: int = 250,
        seed: int | None = None,
        cost_offset: float = 3.2,
        target_x: float = 6.0,
    ):
        super().__init__(episode_length, seed)
        self.action_low = np.array([-FORCE_LIMIT])
        self.action_high = np.array([FORCE_LIMIT])
        self.cost_offset = cost_offset
        self.target_x = target_x

    def _initial_state(self) -> Array:
        x = self._rng.uniform(0.0, 4.0)
        x_dot, theta, theta_dot = self._rng.uniform(-0.05, 0.05, size=3)
        return np.array([x, x_dot, theta, theta_dot])

    def reward(self, state: Array) -> float:
        x, _, theta, _ = state
        pos = 1.0 - abs(x - self.target_x)
        ang = (np.pi / 2 - abs(theta)) / (np.pi / 2)
        return 20.0 * np.sign(pos) * pos**2 + np.sign(ang) * ang**2

    def constraint_cost(self, state: Array) -> float:
        return max(abs(state[0]) - self.cost_offset, 0.0) ** 2 / 5.0

    def _exit(self, state: Array) -> bool:
        return not (0.0 <= state[0] <= 10.0)

    def _default_push_direction(self) -> Array:
        return np.array([1.0])

    def _integrate(self, state: Array, action: Array, kick: Array | None) -> Array:
        x, x_dot, theta, theta_dot = state
        force = action[0]
        total_mass = CART_MASS + POLE_MASS
        pole_ml = POLE_MASS * POLE_HALF_LENGTH
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        temp = (force + pole_ml * theta_dot**2 * sin_t) / total_mass
        theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
            POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos_t**2 / total_mass)
        )
        x_acc = temp - pole_ml * theta_acc * cos_t / total_mass
        if kick is not None:
            # impulse modelled as a direct push on the cart body
            x_acc += kick[0] / total_mass
        # semi-implicit Euler: velocities first, positions with new velocities
        x_dot = x_dot + DT * x_acc
        x = x + DT * x_dot
        theta_dot = theta_dot + DT * theta_acc
        theta = theta + DT * theta_dot
        return np.array([x, x_dot, theta, theta_dot])
