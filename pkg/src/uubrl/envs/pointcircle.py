"""Point mass rewarded for counter-clockwise motion on a wide circle.

The reward peaks while circulating along radius 15, but the x coordinate is
constrained to a narrow band |x| <= 2.4, so the agent has to trade the wide
circle for motion inside the strip.
"""

from __future__ import annotations

import numpy as np

from ..nets import Array
from .base import SafeEnv

DT = 0.1
CIRCLE_RADIUS = 15.0


class PointCircle(SafeEnv):
    state_dim = 4  # (x, y, vx, vy)
    action_dim = 2

    def __init__(self, episode_length: int = 65, seed: int | None = None, x_limit: float = 2.4):
        super().__init__(episode_length, seed)
        self.action_low = np.array([-1.0, -1.0])
        self.action_high = np.array([1.0, 1.0])
        self.x_limit = x_limit

    def _initial_state(self) -> Array:
        return np.zeros(4)

    def reward(self, state: Array) -> float:
        x, y, vx, vy = state
        radius = np.hypot(x, y)
        return (-y * vx + x * vy) / (1.0 + abs(radius - CIRCLE_RADIUS))

    def constraint_cost(self, state: Array) -> float:
        return max(abs(state[0]) - self.x_limit, 0.0)

    def _default_push_direction(self) -> Array:
        return np.array([1.0, 0.0])

    def _integrate(self, state: Array, action: Array, kick: Array | None) -> Array:
        x, y, vx, vy = state
        acc = action.copy()  # unit mass
        if kick is not None:
            acc += kick
        vx = vx + DT * acc[0]
        vy = vy + DT * acc[1]
        x = x + DT * vx
        y = y + DT * vy
        return np.array([x, y, vx, vy])
