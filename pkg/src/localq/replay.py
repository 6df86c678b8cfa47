"""Uniform experience replay with episode-aware sub-trajectory sampling.

Transitions live in a ring buffer (oldest evicted first). Each stored entry
remembers how many steps its episode had already run, which makes window
validity an O(1) check: a window ending at j replays b = min(K, age(j))
predecessor steps, and is valid only when all of them are still in the
buffer. Suffixes of episodes whose early steps were evicted therefore stay
unsampleable until they are at least K steps past the buffer tail, and no
window ever spans an episode boundary.

Windows shorter than K occur at episode starts and are replayed from a
zeroed recurrent state rather than discarded.

Storage is chunk-grown up to capacity so huge nominal capacities cost no
memory until filled. Observations are kept in the dtype the environment
declares (e.g. uint8 for binary grids) and widened to float32 on sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyBufferError(RuntimeError):
    pass


@dataclass
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    terminal: bool
    truncated: bool = False


@dataclass
class SubTrajectory:
    """Up to K+1 consecutive same-episode transitions ending at the update step."""

    transitions: list[Transition]
    burn_in_len: int


@dataclass
class BatchSample:
    """Vectorized window batch; burn-in rows are left-padded with zero obs."""

    burn_obs: np.ndarray    # (B, K, obs_dim) float32
    burn_len: np.ndarray    # (B,) int
    burn_action: np.ndarray  # (B, K) int (padding rows are 0)
    burn_reward: np.ndarray  # (B, K) float32
    obs: np.ndarray         # (B, obs_dim) float32, s_j
    action: np.ndarray      # (B,) int
    reward: np.ndarray      # (B,) float32
    next_obs: np.ndarray    # (B, obs_dim) float32
    terminal: np.ndarray    # (B,) bool
    truncated: np.ndarray   # (B,) bool


class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, obs_dtype=np.float32, chunk: int = 1 << 16):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.obs_dtype = obs_dtype
        self._chunk = min(chunk, capacity)
        self._alloc = 0
        self._count = 0  # total pushes ever
        self._next_age = 0
        self._grow(self._chunk)

    def _grow(self, n: int) -> None:
        n = min(n, self.capacity)
        if n <= self._alloc:
            return
        def extend(arr, shape, dtype):
            new = np.zeros(shape, dtype=dtype)
            if arr is not None:
                new[: len(arr)] = arr
            return new
        self._obs = extend(getattr(self, "_obs", None), (n, self.obs_dim), self.obs_dtype)
        self._next_obs = extend(getattr(self, "_next_obs", None), (n, self.obs_dim), self.obs_dtype)
        self._action = extend(getattr(self, "_action", None), (n,), np.int32)
        self._reward = extend(getattr(self, "_reward", None), (n,), np.float32)
        self._terminal = extend(getattr(self, "_terminal", None), (n,), bool)
        self._truncated = extend(getattr(self, "_truncated", None), (n,), bool)
        self._age = extend(getattr(self, "_age", None), (n,), np.int64)
        self._alloc = n

    @property
    def size(self) -> int:
        return min(self._count, self.capacity)

    @property
    def tail(self) -> int:
        """Absolute index of the oldest transition still stored."""
        return self._count - self.size

    def push(self, t: Transition) -> None:
        if self._count >= self._alloc and self._alloc < self.capacity:
            self._grow(self._alloc * 2)
        slot = self._count % self.capacity
        self._obs[slot] = np.asarray(t.s, dtype=self.obs_dtype)
        self._next_obs[slot] = np.asarray(t.s_next, dtype=self.obs_dtype)
        self._action[slot] = t.a
        self._reward[slot] = t.r
        self._terminal[slot] = t.terminal
        self._truncated[slot] = t.truncated
        self._age[slot] = self._next_age
        self._next_age = 0 if (t.terminal or t.truncated) else self._next_age + 1
        self._count += 1

    def _slots(self, idx: np.ndarray) -> np.ndarray:
        return idx % self.capacity

    def valid_window_ends(self, seq_len: int) -> np.ndarray:
        """Absolute indices j whose full burn-in window is still stored."""
        if self.size == 0:
            return np.empty(0, dtype=np.int64)
        idx = np.arange(self.tail, self._count, dtype=np.int64)
        ages = self._age[self._slots(idx)]
        burn = np.minimum(seq_len, ages)
        return idx[idx - burn >= self.tail]

    def _draw_window_ends(self, batch_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise EmptyBufferError("replay buffer is empty")
        ends = rng.integers(self.tail, self._count, size=batch_size)
        for _ in range(64):
            burn = np.minimum(seq_len, self._age[self._slots(ends)])
            bad = ends - burn < self.tail
            n_bad = int(bad.sum())
            if n_bad == 0:
                return ends
            ends[bad] = rng.integers(self.tail, self._count, size=n_bad)
        valid = self.valid_window_ends(seq_len)
        if len(valid) == 0:
            raise EmptyBufferError("no sampleable windows in the buffer")
        burn = np.minimum(seq_len, self._age[self._slots(ends)])
        bad = ends - burn < self.tail
        ends[bad] = valid[rng.integers(0, len(valid), size=int(bad.sum()))]
        return ends

    def _transition_at(self, idx: int) -> Transition:
        slot = idx % self.capacity
        return Transition(
            s=self._obs[slot].astype(np.float32),
            a=int(self._action[slot]),
            r=float(self._reward[slot]),
            s_next=self._next_obs[slot].astype(np.float32),
            terminal=bool(self._terminal[slot]),
            truncated=bool(self._truncated[slot]),
        )

    def sample(self, batch_size: int, seq_len: int, rng: np.random.Generator) -> list[SubTrajectory]:
        """B sub-trajectories with uniformly drawn end indices."""
        if seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        ends = self._draw_window_ends(batch_size, seq_len, rng)
        out = []
        for j in ends:
            burn = int(min(seq_len, self._age[self._slots(np.int64(j))]))
            transitions = [self._transition_at(int(i)) for i in range(j - burn, j + 1)]
            out.append(SubTrajectory(transitions=transitions, burn_in_len=burn))
        return out

    def sample_batch(self, batch_size: int, seq_len: int, rng: np.random.Generator) -> BatchSample:
        """Stacked-array equivalent of sample(); identical window selection."""
        if seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        ends = self._draw_window_ends(batch_size, seq_len, rng)
        burn = np.minimum(seq_len, self._age[self._slots(ends)]).astype(np.int64)
        cols = np.arange(seq_len, dtype=np.int64)
        gather = ends[:, None] - seq_len + cols[None, :]
        mask = cols[None, :] >= (seq_len - burn)[:, None]
        slots = self._slots(np.where(mask, gather, 0))
        burn_obs = np.where(mask[:, :, None], self._obs[slots], 0).astype(np.float32)
        burn_action = np.where(mask, self._action[slots], 0).astype(np.int64)
        burn_reward = np.where(mask, self._reward[slots], 0).astype(np.float32)
        end_slots = self._slots(ends)
        return BatchSample(
            burn_obs=burn_obs,
            burn_len=burn,
            burn_action=burn_action,
            burn_reward=burn_reward,
            obs=self._obs[end_slots].astype(np.float32),
            action=self._action[end_slots].astype(np.int64),
            reward=self._reward[end_slots].astype(np.float32),
            next_obs=self._next_obs[end_slots].astype(np.float32),
            terminal=self._terminal[end_slots].copy(),
            truncated=self._truncated[end_slots].copy(),
        )

    def sample_transitions(self, batch_size: int, rng: np.random.Generator) -> BatchSample:
        """Plain uniform transitions (no burn-in); used by the memoryless baseline."""
        if self.size == 0:
            raise EmptyBufferError("replay buffer is empty")
        idx = rng.integers(self.tail, self._count, size=batch_size)
        slots = self._slots(idx)
        return BatchSample(
            burn_obs=np.zeros((batch_size, 0, self.obs_dim), dtype=np.float32),
            burn_len=np.zeros(batch_size, dtype=np.int64),
            burn_action=np.zeros((batch_size, 0), dtype=np.int64),
            burn_reward=np.zeros((batch_size, 0), dtype=np.float32),
            obs=self._obs[slots].astype(np.float32),
            action=self._action[slots].astype(np.int64),
            reward=self._reward[slots].astype(np.float32),
            next_obs=self._next_obs[slots].astype(np.float32),
            terminal=self._terminal[slots].copy(),
            truncated=self._truncated[slots].copy(),
        )
