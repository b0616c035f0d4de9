"""Crazyflie-scale quadrotor tracking a rising spiral under an altitude cap.

The policy commands small desired offsets in position and velocity; a
cascaded PD layer converts them to thrust and body torques, and the rigid
body is integrated at a fixed step. The reference climbs to z = 1.0 while
the constraint cost punishes altitude above 0.4, so safe tracking means
following the spiral in the plane while staying under the ceiling.

Attitude is kept as roll/pitch/yaw angles with the small-angle kinematics
(angle rates = body rates); the PD layer clamps commanded tilt well away
from +-pi/2.
"""

from __future__ import annotations

import numpy as np

from ..nets import Array
from .base import SafeEnv

DT = 0.01
MASS = 0.03
GRAVITY = 9.8
INERTIA = np.array([1.43e-5, 1.43e-5, 2.89e-5])

SPIRAL_RADIUS = 1.0
SPIRAL_OMEGA = 0.5
SPIRAL_CLIMB = 0.05

KP_POS = 16.0
KD_POS = 8.0
KP_ATT = 400.0
KD_ATT = 40.0
MAX_TILT = 0.5  # rad, singularity guard
MAX_THRUST = 2.0 * MASS * GRAVITY


def spiral_reference(t: float) -> Array:
    return np.array(
        [
            SPIRAL_RADIUS * np.cos(SPIRAL_OMEGA * t),
            SPIRAL_RADIUS * np.sin(SPIRAL_OMEGA * t),
            SPIRAL_CLIMB * t,
        ]
    )


class QuadrotorSafe(SafeEnv):
    # (pos 3, vel 3, attitude 3, body rates 3, reference point 3)
    state_dim = 15
    action_dim = 6

    def __init__(
        self,
        episode_length: int = 2000,
        seed: int | None = None,
        z_limit: float = 0.4,
        done_distance: float = 1.0,
        max_delta_pos: float = 0.05,
        max_delta_vel: float = 0.1,
    ):
        super().__init__(episode_length, seed)
        self.action_low = np.array([-max_delta_pos] * 3 + [-max_delta_vel] * 3)
        self.action_high = -self.action_low
        self.z_limit = z_limit
        self.done_distance = done_distance

    def _initial_state(self) -> Array:
        state = np.zeros(15)
        state[0:3] = spiral_reference(0.0)
        state[3:6] = [0.0, SPIRAL_RADIUS * SPIRAL_OMEGA, SPIRAL_CLIMB]
        state[12:15] = spiral_reference(0.0)
        return state

    def reward(self, state: Array) -> float:
        return -float(np.linalg.norm(state[0:3] - state[12:15])) + 1.0

    def constraint_cost(self, state: Array) -> float:
        return 100.0 * max(abs(state[2]) - self.z_limit, 0.0)

    def _exit(self, state: Array) -> bool:
        return float(np.linalg.norm(state[0:3] - state[12:15])) > self.done_distance

    def _default_push_direction(self) -> Array:
        return np.array([0.0, 0.0, 1.0])

    def _pd_layer(self, state: Array, action: Array) -> tuple[float, Array]:
        """Desired offsets -> (thrust, body torques)."""
        vel = state[3:6]
        att = state[6:9]
        rates = state[9:12]
        # desired = current + commanded offset, so the position error is the offset itself
        acc_cmd = KP_POS * action[0:3] + KD_POS * action[3:6]
        roll, pitch, yaw = att
        thrust = MASS * (GRAVITY + acc_cmd[2]) / max(np.cos(roll) * np.cos(pitch), 0.5)
        thrust = float(np.clip(thrust, 0.0, MAX_THRUST))
        sin_y, cos_y = np.sin(yaw), np.cos(yaw)
        roll_des = (acc_cmd[0] * sin_y - acc_cmd[1] * cos_y) / GRAVITY
        pitch_des = (acc_cmd[0] * cos_y + acc_cmd[1] * sin_y) / GRAVITY
        att_des = np.array(
            [np.clip(roll_des, -MAX_TILT, MAX_TILT), np.clip(pitch_des, -MAX_TILT, MAX_TILT), 0.0]
        )
        torques = INERTIA * (KP_ATT * (att_des - att) - KD_ATT * rates)
        _ = vel  # velocity feedback enters through the commanded offsets
        return thrust, torques

    def _integrate(self, state: Array, action: Array, kick: Array | None) -> Array:
        thrust, torques = self._pd_layer(state, action)
        pos, vel = state[0:3].copy(), state[3:6].copy()
        att, rates = state[6:9].copy(), state[9:12].copy()
        roll, pitch, yaw = att
        # body-z axis of the ZYX-Euler rotation
        body_z = np.array(
            [
                np.cos(roll) * np.sin(pitch) * np.cos(yaw) + np.sin(roll) * np.sin(yaw),
                np.cos(roll) * np.sin(pitch) * np.sin(yaw) - np.sin(roll) * np.cos(yaw),
                np.cos(roll) * np.cos(pitch),
            ]
        )
        acc = (thrust / MASS) * body_z - np.array([0.0, 0.0, GRAVITY])
        if kick is not None:
            acc = acc + kick / MASS
        rate_acc = (torques - np.cross(rates, INERTIA * rates)) / INERTIA
        vel = vel + DT * acc
        pos = pos + DT * vel
        rates = rates + DT * rate_acc
        att = att + DT * rates
        out = np.empty(15)
        out[0:3], out[3:6], out[6:9], out[9:12] = pos, vel, att, rates
        out[12:15] = spiral_reference(self._t * DT)
        return out
