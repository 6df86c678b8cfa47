"""Acrobot swing-up, canonical dynamics.

Two-link pendulum with torque {-1, 0, +1} on the second joint. Internal
state (theta1, theta2, dtheta1, dtheta2) starts uniformly in [-0.1, 0.1];
the observation is (cos t1, sin t1, cos t2, sin t2, dt1, dt2). One control
step integrates the equations of motion with a single RK4 step of dt = 0.2,
then wraps angles to [-pi, pi) and clips velocities to |dt1| <= 4*pi,
|dt2| <= 9*pi. Link masses/lengths are all 1, centers of mass at 0.5,
inertia 1, g = 9.8. Terminal when -cos(t1) - cos(t2 + t1) > 1 (tip above
the bar); reward -1.0 per non-terminal step, 0.0 on the terminal one;
truncation at 500 steps.
"""

from __future__ import annotations

import math

import numpy as np

from .base import Env, EnvSpec

DT = 0.2
LINK_MASS = 1.0
LINK_LENGTH = 1.0
LINK_COM = 0.5
LINK_MOI = 1.0
G = 9.8
MAX_VEL_1 = 4 * math.pi
MAX_VEL_2 = 9 * math.pi
TORQUES = (-1.0, 0.0, 1.0)


def _dsdt(s: np.ndarray, torque: float) -> np.ndarray:
    m1 = m2 = LINK_MASS
    l1 = LINK_LENGTH
    lc1 = lc2 = LINK_COM
    i1 = i2 = LINK_MOI
    theta1, theta2, dtheta1, dtheta2 = s
    d1 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * math.cos(theta2)) + i1 + i2
    d2 = m2 * (lc2**2 + l1 * lc2 * math.cos(theta2)) + i2
    phi2 = m2 * lc2 * G * math.cos(theta1 + theta2 - math.pi / 2)
    phi1 = (
        -m2 * l1 * lc2 * dtheta2**2 * math.sin(theta2)
        - 2 * m2 * l1 * lc2 * dtheta2 * dtheta1 * math.sin(theta2)
        + (m1 * lc1 + m2 * l1) * G * math.cos(theta1 - math.pi / 2)
        + phi2
    )
    ddtheta2 = (
        torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1**2 * math.sin(theta2) - phi2
    ) / (m2 * lc2**2 + i2 - d2**2 / d1)
    ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
    return np.array([dtheta1, dtheta2, ddtheta1, ddtheta2])


def _rk4_step(s: np.ndarray, torque: float, dt: float) -> np.ndarray:
    k1 = _dsdt(s, torque)
    k2 = _dsdt(s + dt / 2 * k1, torque)
    k3 = _dsdt(s + dt / 2 * k2, torque)
    k4 = _dsdt(s + dt * k3, torque)
    return s + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2 * math.pi) - math.pi


class Acrobot(Env):
    spec = EnvSpec(name="acrobot", obs_dim=6, action_count=3, max_episode_steps=500)

    def _reset_state(self) -> np.ndarray:
        self._state = self._rng.uniform(-0.1, 0.1, size=4)
        return self._obs()

    def _obs(self) -> np.ndarray:
        t1, t2, dt1, dt2 = self._state
        return np.array(
            [math.cos(t1), math.sin(t1), math.cos(t2), math.sin(t2), dt1, dt2],
            dtype=np.float32,
        )

    def _step_dynamics(self, action: int):
        s = _rk4_step(self._state, TORQUES[action], DT)
        s[0] = _wrap(s[0])
        s[1] = _wrap(s[1])
        s[2] = min(max(s[2], -MAX_VEL_1), MAX_VEL_1)
        s[3] = min(max(s[3], -MAX_VEL_2), MAX_VEL_2)
        self._state = s
        terminal = -math.cos(s[0]) - math.cos(s[1] + s[0]) > 1.0
        return self._obs(), (0.0 if terminal else -1.0), terminal
