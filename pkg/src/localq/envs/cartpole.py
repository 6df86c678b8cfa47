"""Cart-pole balancing, canonical dynamics.

State (x, x_dot, theta, theta_dot), all four drawn uniformly from
[-0.05, 0.05] at reset. A force of +-10 N is applied to the cart; Euler
integration with tau = 0.02 s; gravity 9.8, cart mass 1.0, pole mass 0.1,
pole half-length 0.5. The episode terminates when |x| > 2.4 or
|theta| > 12 degrees, truncates at 500 steps, and every step (including the
terminating one) is rewarded 1.0, so the maximum return is 500.
"""

from __future__ import annotations

import math

import numpy as np

from .base import Env, EnvSpec

GRAVITY = 9.8
MASS_CART = 1.0
MASS_POLE = 0.1
TOTAL_MASS = MASS_CART + MASS_POLE
HALF_LENGTH = 0.5
POLE_MASS_LENGTH = MASS_POLE * HALF_LENGTH
FORCE_MAG = 10.0
TAU = 0.02
THETA_LIMIT = 12 * 2 * math.pi / 360
X_LIMIT = 2.4


class CartPole(Env):
    spec = EnvSpec(name="cartpole", obs_dim=4, action_count=2, max_episode_steps=500)

    def _reset_state(self) -> np.ndarray:
        self._state = self._rng.uniform(-0.05, 0.05, size=4)
        return self._state.astype(np.float32)

    def _step_dynamics(self, action: int):
        x, x_dot, theta, theta_dot = self._state
        force = FORCE_MAG if action == 1 else -FORCE_MAG
        cos_t = math.cos(theta)
        sin_t = math.sin(theta)
        temp = (force + POLE_MASS_LENGTH * theta_dot**2 * sin_t) / TOTAL_MASS
        theta_acc = (GRAVITY * sin_t - cos_t * temp) / (
            HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos_t**2 / TOTAL_MASS)
        )
        x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos_t / TOTAL_MASS
        x = x + TAU * x_dot
        x_dot = x_dot + TAU * x_acc
        theta = theta + TAU * theta_dot
        theta_dot = theta_dot + TAU * theta_acc
        self._state = np.array([x, x_dot, theta, theta_dot])
        terminal = abs(x) > X_LIMIT or abs(theta) > THETA_LIMIT
        return self._state.astype(np.float32), 1.0, terminal
