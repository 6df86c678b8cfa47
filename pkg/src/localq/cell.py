"""One value cell: bias-free ReLU features with tanh-gated prediction heads.

The cell maps a concatenated input vector x = [below, above_prev, skip] to

    h       = relu(W_in . x)
    q[head] = tanh(W_att[head] . x) . h

with one head per action (or per action-quantile pair in distributional
mode) and no bias terms anywhere. Training is strictly local: the gradient
routines below differentiate a loss on q with respect to the cell's own
weights only. No derivative with respect to the inputs is ever formed, so
nothing can propagate to neighbouring cells.

The attention tensor may be stored directly (one d_out x d_in matrix per
head) or factored as a mixture of `rank` shared basis matrices,
W_att[head] = sum_j U[head, j] * reshape(V[j]), which keeps the parameter
count linear in the number of heads.

Public functions take single vectors; the *_batch variants operate on
row-stacked inputs and are what the trainer uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numkit import DEFAULT_DTYPE


@dataclass
class FullAttention:
    w: np.ndarray  # (heads, d_out, d_in)


@dataclass
class FactoredAttention:
    u: np.ndarray  # (heads, rank)
    v: np.ndarray  # (rank, d_out * d_in)
    d_out: int
    d_in: int

    @property
    def rank(self) -> int:
        return self.u.shape[1]

    def materialize(self) -> np.ndarray:
        """The per-head attention matrices this factorization represents."""
        v3 = self.v.reshape(self.rank, self.d_out, self.d_in)
        return np.einsum("hk,kdi->hdi", self.u, v3)


Attention = FullAttention | FactoredAttention


@dataclass
class CellParams:
    w_in: np.ndarray  # (d_out, d_in)
    attention: Attention
    quantiles_per_action: int = 1

    @property
    def d_out(self) -> int:
        return self.w_in.shape[0]

    @property
    def d_in(self) -> int:
        return self.w_in.shape[1]

    @property
    def heads(self) -> int:
        if isinstance(self.attention, FullAttention):
            return self.attention.w.shape[0]
        return self.attention.u.shape[0]

    @property
    def action_count(self) -> int:
        return self.heads // self.quantiles_per_action

    def tensors(self) -> list[np.ndarray]:
        """Parameter tensors in declaration order (checkpoint/optimizer order)."""
        if isinstance(self.attention, FullAttention):
            return [self.w_in, self.attention.w]
        return [self.w_in, self.attention.u, self.attention.v]

    def set_tensors(self, tensors: list[np.ndarray]) -> None:
        self.w_in = tensors[0]
        if isinstance(self.attention, FullAttention):
            self.attention.w = tensors[1]
        else:
            self.attention.u = tensors[1]
            self.attention.v = tensors[2]


@dataclass
class CellOutput:
    h: np.ndarray  # (d_out,)
    q: np.ndarray  # (action_count, quantiles_per_action)


@dataclass
class CellGrad:
    """Loss gradient, shape-congruent with CellParams; holds nothing for inputs."""

    w_in: np.ndarray
    attention: Attention

    def tensors(self) -> list[np.ndarray]:
        if isinstance(self.attention, FullAttention):
            return [self.w_in, self.attention.w]
        return [self.w_in, self.attention.u, self.attention.v]


def init_cell(
    d_in: int,
    d_out: int,
    action_count: int,
    rng: np.random.Generator,
    quantiles_per_action: int = 1,
    attention_rank: int | None = None,
    dtype=DEFAULT_DTYPE,
) -> CellParams:
    """Random fan-in-scaled W_in; attention starts at exactly zero.

    Zero attention makes every initial prediction exactly 0 (unbiased) and,
    more importantly, keeps the per-head predictions from decorrelating at
    init: random attention heads give the bootstrap max() operator noise to
    rectify, which measurably diverges under TD training. tanh'(0) = 1, so
    zero attention still receives full gradient. In the factored form only
    the basis factor V is zeroed (U random): one nonzero factor keeps the
    product trainable while the materialized heads still start at zero.
    """
    heads = action_count * quantiles_per_action
    lim_in = math.sqrt(6.0 / d_in)
    w_in = rng.uniform(-lim_in, lim_in, size=(d_out, d_in)).astype(dtype)
    if attention_rank is None:
        w_att = np.zeros((heads, d_out, d_in), dtype=dtype)
        attention: Attention = FullAttention(w_att)
    else:
        lim_u = math.sqrt(1.0 / attention_rank)
        u = rng.uniform(-lim_u, lim_u, size=(heads, attention_rank)).astype(dtype)
        v = np.zeros((attention_rank, d_out * d_in), dtype=dtype)
        attention = FactoredAttention(u, v, d_out=d_out, d_in=d_in)
    return CellParams(w_in=w_in, attention=attention, quantiles_per_action=quantiles_per_action)


def randomize_attention(p: CellParams, rng: np.random.Generator, scale: float | None = None) -> None:
    """Fill the attention tensors with uniform noise (gradient suites need a
    generic point; training initializes them at zero)."""
    lim = math.sqrt(1.0 / p.d_in) if scale is None else scale
    att = p.attention
    if isinstance(att, FullAttention):
        att.w = rng.uniform(-lim, lim, size=att.w.shape).astype(att.w.dtype)
    else:
        att.u = rng.uniform(-lim, lim, size=att.u.shape).astype(att.u.dtype)
        att.v = rng.uniform(-lim, lim, size=att.v.shape).astype(att.v.dtype)


def concat_input(
    p: CellParams,
    below: np.ndarray,
    above_prev: np.ndarray | None = None,
    skip: np.ndarray | None = None,
) -> np.ndarray:
    parts = [np.asarray(below)]
    if above_prev is not None:
        parts.append(np.asarray(above_prev))
    if skip is not None:
        parts.append(np.asarray(skip))
    x = np.concatenate(parts) if len(parts) > 1 else parts[0]
    if x.ndim != 1 or x.shape[0] != p.d_in:
        raise ValueError(f"cell input length {x.shape} does not match d_in={p.d_in}")
    return x


def hidden_batch(p: CellParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pre-activations and ReLU activations for row-stacked inputs (B, d_in)."""
    if x.ndim != 2 or x.shape[1] != p.d_in:
        raise ValueError(f"expected (B, {p.d_in}) input, got {x.shape}")
    z = x @ p.w_in.T
    return z, np.maximum(z, 0)


def _attention_tanh_batch(p: CellParams, x: np.ndarray):
    """tanh(W_att[head] . x) for all heads: (B, heads, d_out).

    For factored attention also returns the basis responses P (B, rank, d_out)
    needed by the gradient routines.
    """
    b = x.shape[0]
    att = p.attention
    if isinstance(att, FullAttention):
        heads, d_out, d_in = att.w.shape
        s = x @ att.w.reshape(heads * d_out, d_in).T
        return np.tanh(s.reshape(b, heads, d_out)), None
    rank = att.rank
    pr = (x @ att.v.reshape(rank * att.d_out, att.d_in).T).reshape(b, rank, att.d_out)
    s = np.matmul(att.u, pr)  # (heads, rank) @ (B, rank, d_out) -> (B, heads, d_out)
    return np.tanh(s), pr


def forward_batch(p: CellParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Activations (B, d_out) and predictions (B, action_count, quantiles)."""
    _, h = hidden_batch(p, x)
    t, _ = _attention_tanh_batch(p, x)
    q = np.matmul(t, h[:, :, None])[:, :, 0]  # (B, heads)
    return h, q.reshape(x.shape[0], p.action_count, p.quantiles_per_action)


def cell_forward(
    p: CellParams,
    below: np.ndarray,
    above_prev: np.ndarray | None = None,
    skip: np.ndarray | None = None,
) -> CellOutput:
    x = concat_input(p, below, above_prev, skip)
    h, q = forward_batch(p, x[None, :])
    return CellOutput(h=h[0], q=q[0])


def _zero_grad(p: CellParams) -> CellGrad:
    att = p.attention
    if isinstance(att, FullAttention):
        g_att: Attention = FullAttention(np.zeros_like(att.w))
    else:
        g_att = FactoredAttention(
            np.zeros_like(att.u), np.zeros_like(att.v), d_out=att.d_out, d_in=att.d_in
        )
    return CellGrad(w_in=np.zeros_like(p.w_in), attention=g_att)


def _scatter_head_grads(
    p: CellParams,
    x: np.ndarray,
    head_idx: np.ndarray,
    ds: np.ndarray,
    grad: CellGrad,
    pr: np.ndarray | None,
) -> None:
    """Accumulate attention gradients for per-sample selected heads.

    ds is dLoss/dS for each sample's selected head(s): (B, n_sel, d_out),
    head_idx the matching head indices (B, n_sel).
    """
    b, n_sel, d_out = ds.shape
    att = p.attention
    flat_heads = head_idx.reshape(-1)
    flat_ds = ds.reshape(b * n_sel, d_out)
    if isinstance(att, FullAttention):
        g = grad.attention.w
        x_rep = np.repeat(x, n_sel, axis=0) if n_sel > 1 else x
        for head in np.unique(flat_heads):
            mask = flat_heads == head
            g[head] += flat_ds[mask].T @ x_rep[mask]
    else:
        # dS = U[head] . P  =>  dU[head] += P . ds,  dV[j] += U[head, j] * outer(ds, x)
        pr_rep = np.repeat(pr, n_sel, axis=0) if n_sel > 1 else pr
        x_rep = np.repeat(x, n_sel, axis=0) if n_sel > 1 else x
        du_rows = np.matmul(pr_rep, flat_ds[:, :, None])[:, :, 0]  # (B*n_sel, rank)
        np.add.at(grad.attention.u, flat_heads, du_rows)
        u_sel = att.u[flat_heads]  # (B*n_sel, rank)
        c = u_sel[:, :, None] * flat_ds[:, None, :]  # (B*n_sel, rank, d_out)
        gv = c.reshape(len(flat_heads), -1).T @ x_rep  # (rank*d_out, d_in)
        grad.attention.v += gv.reshape(att.rank, att.d_out * att.d_in)


def td_grad_batch(
    p: CellParams,
    x: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
) -> tuple[float, CellGrad]:
    """Mean squared TD loss over the batch and its exact local gradient.

    Scalar mode only (one quantile per action). Only the selected head of
    each sample receives attention gradient.
    """
    if p.quantiles_per_action != 1:
        raise ValueError("td_grad_batch requires scalar heads; use quantile_grad_batch")
    b = x.shape[0]
    z, h = hidden_batch(p, x)
    t_all, pr = _attention_tanh_batch(p, x)
    rows = np.arange(b)
    t_sel = t_all[rows, actions]  # (B, d_out)
    q = np.einsum("bd,bd->b", t_sel, h)
    err = q - targets.astype(q.dtype)
    loss = float(np.mean(np.square(err, dtype=np.float64)))

    dq = (2.0 / b) * err  # d(mean loss)/dq per sample
    grad = _zero_grad(p)
    dh = dq[:, None] * t_sel
    dz = np.where(z > 0, dh, 0)
    grad.w_in += dz.T @ x
    ds = (dq[:, None] * h * (1.0 - np.square(t_sel)))[:, None, :]  # (B, 1, d_out)
    _scatter_head_grads(p, x, actions[:, None], ds, grad, pr)
    return loss, grad


def cell_local_grad(
    p: CellParams,
    below: np.ndarray,
    above_prev: np.ndarray | None,
    skip: np.ndarray | None,
    head: int,
    td_target: float,
) -> tuple[float, CellGrad]:
    """(target - q[head])^2 and its gradient for a single input vector."""
    if head >= p.action_count:
        raise ValueError(f"head {head} out of range for {p.action_count} actions")
    x = concat_input(p, below, above_prev, skip)
    loss, grad = td_grad_batch(
        p, x[None, :], np.array([head]), np.asarray([td_target], dtype=x.dtype)
    )
    return loss, grad


def quantile_midpoints(n: int) -> np.ndarray:
    """tau_i = (2i + 1) / (2n), the midpoint quantile levels."""
    return (2.0 * np.arange(n) + 1.0) / (2.0 * n)


def quantile_grad_batch(
    p: CellParams,
    x: np.ndarray,
    actions: np.ndarray,
    targets: np.ndarray,
    kappa: float = 1.0,
) -> tuple[float, CellGrad]:
    """Quantile Huber loss against per-quantile targets, averaged over quantiles.

    Predicted quantile i of the selected action is matched against target i at
    level tau_i = (2i+1)/(2n); loss = (1/n) sum_i |tau_i - 1{u_i < 0}| * huber(u_i)
    with u_i = target_i - prediction_i, averaged over the batch.
    """
    n = p.quantiles_per_action
    if targets.ndim != 2 or targets.shape[1] != n:
        raise ValueError(f"expected (B, {n}) quantile targets, got {targets.shape}")
    b = x.shape[0]
    z, h = hidden_batch(p, x)
    t_all, pr = _attention_tanh_batch(p, x)
    rows = np.arange(b)
    head_idx = actions[:, None] * n + np.arange(n)[None, :]  # (B, n)
    t_sel = t_all[rows[:, None], head_idx]  # (B, n, d_out)
    theta = np.einsum("bnd,bd->bn", t_sel, h)  # predicted quantiles
    u = targets.astype(theta.dtype) - theta
    taus = quantile_midpoints(n).astype(theta.dtype)
    abs_u = np.abs(u)
    huber = np.where(abs_u <= kappa, 0.5 * np.square(u), kappa * (abs_u - 0.5 * kappa))
    weight = np.abs(taus[None, :] - (u < 0))
    loss = float(np.mean(np.sum(weight * huber, axis=1, dtype=np.float64) / n))

    dhuber = np.clip(u, -kappa, kappa)
    dtheta = -(weight * dhuber) / n * (1.0 / b)  # d(mean loss)/dtheta
    dtheta = dtheta.astype(theta.dtype)
    grad = _zero_grad(p)
    dh = np.einsum("bn,bnd->bd", dtheta, t_sel)
    dz = np.where(z > 0, dh, 0)
    grad.w_in += dz.T @ x
    ds = dtheta[:, :, None] * h[:, None, :] * (1.0 - np.square(t_sel))  # (B, n, d_out)
    _scatter_head_grads(p, x, head_idx, ds, grad, pr)
    return loss, grad


def quantile_local_grad(
    p: CellParams,
    below: np.ndarray,
    above_prev: np.ndarray | None,
    skip: np.ndarray | None,
    head: int,
    target_quantiles: np.ndarray,
) -> tuple[float, CellGrad]:
    if head >= p.action_count:
        raise ValueError(f"head {head} out of range for {p.action_count} actions")
    target_quantiles = np.asarray(target_quantiles)
    if target_quantiles.shape != (p.quantiles_per_action,):
        raise ValueError(
            f"expected {p.quantiles_per_action} target quantiles, got {target_quantiles.shape}"
        )
    x = concat_input(p, below, above_prev, skip)
    return quantile_grad_batch(p, x[None, :], np.array([head]), target_quantiles[None, :])


def xent_grad_batch(
    p: CellParams,
    x: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, CellGrad, np.ndarray]:
    """Softmax cross-entropy over the cell's heads-as-class-logits.

    All heads receive attention gradient (the softmax couples them). Returns
    (mean loss, gradient, class probabilities).
    """
    if p.quantiles_per_action != 1:
        raise ValueError("classification uses one logit per class head")
    b = x.shape[0]
    z, h = hidden_batch(p, x)
    t_all, pr = _attention_tanh_batch(p, x)  # (B, A, d_out)
    logits = np.matmul(t_all, h[:, :, None])[:, :, 0]  # (B, A)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    loss = float(np.mean(-np.log(np.maximum(probs[rows, labels], 1e-30)), dtype=np.float64))

    dq = probs.copy()
    dq[rows, labels] -= 1.0
    dq /= b  # (B, A)
    grad = _zero_grad(p)
    dh = np.einsum("ba,bad->bd", dq, t_all)
    dz = np.where(z > 0, dh, 0)
    grad.w_in += dz.T @ x
    ds = dq[:, :, None] * h[:, None, :] * (1.0 - np.square(t_all))  # (B, A, d_out)
    att = p.attention
    if isinstance(att, FullAttention):
        heads, d_out, d_in = att.w.shape
        grad.attention.w += (
            ds.transpose(1, 2, 0).reshape(heads * d_out, b) @ x
        ).reshape(heads, d_out, d_in)
    else:
        grad.attention.u += np.einsum("bad,bkd->ak", ds, pr)
        c = np.einsum("ak,bad->bkd", att.u, ds)  # (B, rank, d_out)
        gv = c.reshape(b, -1).T @ x
        grad.attention.v += gv.reshape(att.rank, att.d_out * att.d_in)
    return loss, grad, probs


def cross_entropy_local_grad(
    p: CellParams,
    below: np.ndarray,
    above_prev: np.ndarray | None,
    skip: np.ndarray | None,
    label: int,
) -> tuple[float, CellGrad]:
    if label >= p.action_count:
        raise ValueError(f"label {label} out of range for {p.action_count} classes")
    x = concat_input(p, below, above_prev, skip)
    loss, grad, _ = xent_grad_batch(p, x[None, :], np.array([label]))
    return loss, grad
