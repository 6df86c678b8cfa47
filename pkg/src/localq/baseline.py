"""Fully-connected double DQN trained with ordinary whole-network backprop.

The comparison baseline. Unlike the cell network it uses bias terms and a
linear output head, trains on batches of independent transitions (no
sequence burn-in; it is memoryless), and shares the double-Q target rule,
replay buffer, clipping and optimizer with the rest of the package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .network import read_checkpoint, write_checkpoint
from .numkit import DEFAULT_DTYPE, AdamState, adam_step, clip_global_norm, lr_at

MLP_PRESETS = {
    "minatar_dqn": (1024, 512, 512),
    "classic_dqn": (120, 84),
}


@dataclass
class MlpParams:
    layers: list[tuple[np.ndarray, np.ndarray]]  # (weight (out, in), bias (out,))

    @property
    def action_count(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def obs_dim(self) -> int:
        return self.layers[0][0].shape[1]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    def set_tensors(self, tensors: list[np.ndarray]) -> None:
        self.layers = [(tensors[2 * i], tensors[2 * i + 1]) for i in range(len(self.layers))]


def init_mlp(
    obs_dim: int,
    hidden: tuple[int, ...],
    action_count: int,
    seed: int,
    dtype=DEFAULT_DTYPE,
) -> MlpParams:
    rng = np.random.default_rng(seed)
    sizes = (obs_dim, *hidden, action_count)
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(1.0 / fan_in)
        w = rng.uniform(-lim, lim, size=(fan_out, fan_in)).astype(dtype)
        b = rng.uniform(-lim, lim, size=fan_out).astype(dtype)
        layers.append((w, b))
    return MlpParams(layers=layers)


def clone_mlp(p: MlpParams) -> MlpParams:
    return MlpParams(layers=[(w.copy(), b.copy()) for w, b in p.layers])


def mlp_forward_batch(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Q-values (B, A) and the per-layer caches backprop needs."""
    if x.ndim != 2 or x.shape[1] != p.obs_dim:
        raise ValueError(f"expected (B, {p.obs_dim}) inputs, got {x.shape}")
    caches = []
    a = x
    last = len(p.layers) - 1
    for i, (w, b) in enumerate(p.layers):
        z = a @ w.T + b
        caches.append((a, z))
        a = z if i == last else np.maximum(z, 0)
    return a, caches


def mlp_forward(p: MlpParams, obs: np.ndarray) -> np.ndarray:
    obs = np.asarray(obs)
    if obs.ndim != 1:
        raise ValueError("mlp_forward takes a single observation vector")
    q, _ = mlp_forward_batch(p, obs[None, :])
    return q[0]


def mlp_grad_batch(
    p: MlpParams,
    x: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, list[np.ndarray]]:
    """Mean squared TD loss and its full chain-rule gradient (w1, b1, w2, b2, ...)."""
    b = x.shape[0]
    q, caches = mlp_forward_batch(p, x)
    rows = np.arange(b)
    err = q[rows, actions] - targets.astype(q.dtype)
    loss = float(np.mean(np.square(err, dtype=np.float64)))
    dq = np.zeros_like(q)
    dq[rows, actions] = (2.0 / b) * err
    grads: list[np.ndarray] = []
    delta = dq
    for i in range(len(p.layers) - 1, -1, -1):
        w, _ = p.layers[i]
        a_prev, z = caches[i]
        if i < len(p.layers) - 1:
            delta = np.where(z > 0, delta, 0)
        gw = delta.T @ a_prev
        gb = delta.sum(axis=0)
        grads.insert(0, gb)
        grads.insert(0, gw)
        delta = delta @ w
    return loss, grads


def mlp_backprop(
    p: MlpParams,
    obs: np.ndarray,
    action: int,
    td_target: float,
) -> tuple[float, list[np.ndarray]]:
    """(target - Q(s, a))^2 and its gradient for a single transition."""
    if action >= p.action_count:
        raise ValueError(f"action {action} out of range")
    obs = np.asarray(obs)
    return mlp_grad_batch(p, obs[None, :], np.array([action]), np.asarray([td_target]))


def train_step_mlp(
    online: MlpParams,
    target: MlpParams,
    buf,
    cfg,
    step: int,
    opt_states: list[AdamState],
    rng: np.random.Generator,
) -> np.ndarray:
    """Double-Q update on a batch of independent transitions."""
    sample = buf.sample_transitions(cfg.batch_size, rng)
    q_next, _ = mlp_forward_batch(online, sample.next_obs)
    a_star = np.argmax(q_next, axis=1)
    qt_next, _ = mlp_forward_batch(target, sample.next_obs)
    rows = np.arange(sample.obs.shape[0])
    bootstrap = cfg.gamma * (~sample.terminal).astype(np.float32)
    y = sample.reward + bootstrap * qt_next[rows, a_star]
    loss, grads = mlp_grad_batch(online, sample.obs, sample.action, y)
    clipped = clip_global_norm(grads, cfg.max_grad_norm)
    new_tensors, opt_states[0] = adam_step(online.tensors(), clipped, opt_states[0], lr_at(cfg.lr, step))
    online.set_tensors(new_tensors)
    return np.array([loss])


def save_mlp(path, p: MlpParams) -> None:
    meta = {
        "obs_dim": str(p.obs_dim),
        "hidden": ",".join(str(w.shape[0]) for w, _ in p.layers[:-1]),
        "action_count": str(p.action_count),
    }
    tensors = []
    for i, (w, b) in enumerate(p.layers):
        tensors.append((f"layer{i}.w", w))
        tensors.append((f"layer{i}.b", b))
    write_checkpoint(path, "mlp", meta, tensors)


def load_mlp(path) -> MlpParams:
    kind, meta, tensors = read_checkpoint(path)
    if kind != "mlp":
        raise ValueError(f"expected an mlp checkpoint, got kind={kind!r}")
    by_name = dict(tensors)
    n_layers = len(tensors) // 2
    layers = [(by_name[f"layer{i}.w"], by_name[f"layer{i}.b"]) for i in range(n_layers)]
    return MlpParams(layers=layers)
