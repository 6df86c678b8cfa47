"""Common episodic environment interface.

Environments are deterministic given (seed, action sequence). reset(seed)
reseeds the internal generator; reset() without a seed continues it, so
consecutive episodes differ but the whole run replays identically. Stepping
a finished episode raises until reset is called. Truncation is set purely
by the step limit and is reported separately from true termination (both
can be true when they coincide).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_count: int
    max_episode_steps: int | None
    obs_storage_dtype: type = np.float32  # replay-buffer storage hint


class Env:
    spec: EnvSpec

    def __init__(self, seed: int | None = None):
        self._rng = np.random.default_rng(seed)
        self._steps = 0
        self._done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self._steps = 0
        self._done = False
        return self._reset_state()

    def step(self, action: int) -> tuple[np.ndarray, float, bool, bool]:
        if self._done:
            raise EpisodeDoneError(f"{self.spec.name}: episode is over; call reset()")
        if not 0 <= action < self.spec.action_count:
            raise ValueError(f"action {action} out of range [0, {self.spec.action_count})")
        obs, reward, terminal = self._step_dynamics(int(action))
        self._steps += 1
        limit = self.spec.max_episode_steps
        truncated = limit is not None and self._steps >= limit
        self._done = terminal or truncated
        return obs, reward, terminal, truncated

    # subclasses implement the actual dynamics
    def _reset_state(self) -> np.ndarray:
        raise NotImplementedError

    def _step_dynamics(self, action: int) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


def dump_trajectory(env: Env, actions, path, seed: int | None = None) -> None:
    """Golden-trace dump: one tab-separated `step action reward terminal` line per step."""
    env.reset(seed=seed)
    with open(path, "w") as f:
        for i, a in enumerate(actions):
            _, reward, terminal, truncated = env.step(a)
            f.write(f"{i}\t{a}\t{reward!r}\t{int(terminal)}\n")
            if terminal or truncated:
                break
