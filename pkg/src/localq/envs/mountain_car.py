"""Mountain car, canonical dynamics.

State (position, velocity); position starts uniformly in [-0.6, -0.4] with
zero velocity. Actions {0, 1, 2} add (action - 1) * 0.001 to velocity on top
of gravity -0.0025 * cos(3 * position); velocity is clipped to +-0.07 and
position to [-1.2, 0.6] (hitting the left wall zeroes leftward velocity).
Terminal at position >= 0.5 with non-negative velocity; reward -1.0 per
step; truncation at 200 steps, so a policy that never reaches the goal
returns exactly -200.
"""

from __future__ import annotations

import math

import numpy as np

from .base import Env, EnvSpec

FORCE = 0.001
GRAVITY = 0.0025
MIN_POSITION = -1.2
MAX_POSITION = 0.6
MAX_SPEED = 0.07
GOAL_POSITION = 0.5


class MountainCar(Env):
    spec = EnvSpec(name="mountaincar", obs_dim=2, action_count=3, max_episode_steps=200)

    def _reset_state(self) -> np.ndarray:
        self._state = np.array([self._rng.uniform(-0.6, -0.4), 0.0])
        return self._state.astype(np.float32)

    def _step_dynamics(self, action: int):
        position, velocity = self._state
        velocity += (action - 1) * FORCE + math.cos(3 * position) * (-GRAVITY)
        velocity = min(max(velocity, -MAX_SPEED), MAX_SPEED)
        position += velocity
        position = min(max(position, MIN_POSITION), MAX_POSITION)
        if position == MIN_POSITION and velocity < 0:
            velocity = 0.0
        self._state = np.array([position, velocity])
        terminal = position >= GOAL_POSITION and velocity >= 0.0
        return self._state.astype(np.float32), -1.0, terminal
