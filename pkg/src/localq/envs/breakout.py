"""Miniature breakout on a 10x10 binary grid.

Rules (version-1 behaviour, no difficulty ramping):

- Four observation planes: paddle, ball, ball trail (previous cell), bricks.
  The observation is the (10, 10, 4) boolean grid flattened to 400 entries.
- The paddle occupies one cell of the bottom row, starting at column 4;
  actions are {no-op, left, right} (clamped at the walls) and are resolved
  before the ball moves.
- Three full brick rows (rows 1-3) are present at the start; whenever the
  ball would reach the bottom row with every brick cleared, the rows refill.
- The ball starts in row 3 at a random side column (0 moving down-left or 9
  moving down-right, which immediately reflects off the wall) and moves one
  diagonal cell per step. Side walls reflect the horizontal direction and
  the ceiling the vertical one.
- Hitting a brick scores +1, removes the brick and reverses the ball; a
  debounce flag suppresses scoring on immediately consecutive brick contacts.
- At the bottom row the ball bounces off the paddle (full reversal when the
  paddle is under the ball's previous column, vertical reflection when it is
  under the ball's new column) and the episode ends when the paddle misses.

There is no step limit; episodes end only by dropping the ball.
"""

from __future__ import annotations

import numpy as np

from .base import Env, EnvSpec

# direction index -> (dx, dy): 0 up-left, 1 up-right, 2 down-left, 3 down-right
_DX = (-1, 1, -1, 1)
_DY = (-1, -1, 1, 1)
_REFLECT_X = (1, 0, 3, 2)
_REFLECT_Y = (2, 3, 0, 1)
_REVERSE = (3, 2, 1, 0)

_PADDLE, _BALL, _TRAIL, _BRICK = 0, 1, 2, 3


class Breakout(Env):
    spec = EnvSpec(
        name="breakout",
        obs_dim=10 * 10 * 4,
        action_count=3,  # no-op, left, right
        max_episode_steps=None,
        obs_storage_dtype=np.uint8,
    )

    def _reset_state(self) -> np.ndarray:
        self._ball_y = 3
        side = int(self._rng.integers(2))
        self._ball_x, self._ball_dir = [(0, 2), (9, 3)][side]
        self._pos = 4
        self._brick_map = np.zeros((10, 10), dtype=bool)
        self._brick_map[1:4, :] = True
        self._strike = False
        self._last_x = self._ball_x
        self._last_y = self._ball_y
        return self._obs()

    def _obs(self) -> np.ndarray:
        grid = np.zeros((10, 10, 4), dtype=bool)
        grid[9, self._pos, _PADDLE] = True
        grid[self._ball_y, self._ball_x, _BALL] = True
        grid[self._last_y, self._last_x, _TRAIL] = True
        grid[:, :, _BRICK] = self._brick_map
        return grid.reshape(-1).astype(np.float32)

    def _step_dynamics(self, action: int):
        reward = 0.0
        terminal = False
        if action == 1:
            self._pos = max(0, self._pos - 1)
        elif action == 2:
            self._pos = min(9, self._pos + 1)

        self._last_x = self._ball_x
        self._last_y = self._ball_y
        new_x = self._ball_x + _DX[self._ball_dir]
        new_y = self._ball_y + _DY[self._ball_dir]

        strike_toggle = False
        if new_x < 0 or new_x > 9:
            new_x = min(max(new_x, 0), 9)
            self._ball_dir = _REFLECT_X[self._ball_dir]
        if new_y < 0:
            new_y = 0
            self._ball_dir = _REFLECT_Y[self._ball_dir]
        elif self._brick_map[new_y, new_x]:
            strike_toggle = True
            if not self._strike:
                reward += 1.0
                self._strike = True
                self._brick_map[new_y, new_x] = False
                new_y = self._last_y
                self._ball_dir = _REVERSE[self._ball_dir]
        elif new_y == 9:
            if not self._brick_map.any():
                self._brick_map[1:4, :] = True
            if self._ball_x == self._pos:
                self._ball_dir = _REVERSE[self._ball_dir]
                new_y = self._last_y
            elif new_x == self._pos:
                self._ball_dir = _REFLECT_Y[self._ball_dir]
                new_y = self._last_y
            else:
                terminal = True

        if not strike_toggle:
            self._strike = False

        self._ball_x = new_x
        self._ball_y = new_y
        return self._obs(), reward, terminal
