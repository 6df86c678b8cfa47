"""Dense array primitives: matvec, global-norm clipping, Adam, LR schedules.

Matrices are 2-D row-major numpy arrays, vectors are 1-D. float32 is the
working precision for training; verification suites pass float64 arrays and
every routine keeps the dtype it is given. Summation order is fixed by the
implementation (no reduction reordering), so repeated runs on one platform
are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


def matvec(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y[i] = sum_j m[i, j] * x[j]."""
    m = np.asarray(m)
    x = np.asarray(x)
    if m.ndim != 2 or x.ndim != 1:
        raise ValueError(f"matvec expects a matrix and a vector, got {m.shape} and {x.shape}")
    if m.shape[1] != x.shape[0]:
        raise ValueError(f"matvec dimension mismatch: {m.shape} @ {x.shape}")
    return m @ x


def global_norm(tensors: list[np.ndarray]) -> float:
    """L2 norm over all entries of all tensors, accumulated in float64."""
    total = 0.0
    for t in tensors:
        total += float(np.sum(np.square(t, dtype=np.float64)))
    return math.sqrt(total)


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale every entry by max_norm/g when the joint L2 norm g exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient entries")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


@dataclass
class AdamState:
    """Optimizer accumulators for one list of parameter tensors."""

    t: int
    m: list[np.ndarray]
    v: list[np.ndarray]


def adam_init(params: list[np.ndarray]) -> AdamState:
    return AdamState(
        t=0,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected adaptive-moment update; returns (new params, new state)."""
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_p: list[np.ndarray] = []
    new_m: list[np.ndarray] = []
    new_v: list[np.ndarray] = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
        m2 = beta1 * m + (1.0 - beta1) * g
        v2 = beta2 * v + (1.0 - beta2) * np.square(g)
        step = lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + eps)
        new_p.append(p - step)
        new_m.append(m2)
        new_v.append(v2)
    return new_p, AdamState(t=t, m=new_m, v=new_v)


@dataclass(frozen=True)
class LrSchedule:
    """Either a constant rate or linear warmup followed by cosine decay."""

    kind: str  # "constant" | "warmup-cosine"
    peak_lr: float
    warmup_steps: int = 0
    total_steps: int = 0
    final_lr: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "warmup-cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be >= 0")
        if self.kind == "warmup-cosine":
            if self.warmup_steps > self.total_steps:
                raise ValueError("warmup_steps must not exceed total_steps")
            if self.final_lr > self.peak_lr:
                raise ValueError("final_lr must not exceed peak_lr")


def lr_at(s: LrSchedule, step: int) -> float:
    """Learning rate at a given step; warmup is linear from 0 to peak_lr."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if s.kind == "constant":
        return s.peak_lr
    if step < s.warmup_steps:
        return s.peak_lr * step / s.warmup_steps
    if step >= s.total_steps:
        return s.final_lr
    span = s.total_steps - s.warmup_steps
    frac = (step - s.warmup_steps) / span
    return s.final_lr + (s.peak_lr - s.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))
