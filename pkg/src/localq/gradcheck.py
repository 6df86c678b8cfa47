"""Finite-difference verification of every analytic gradient path.

Each suite draws random small configurations, computes the analytic
gradient, and compares it against central finite differences of the loss.
The difference quotient is always evaluated in float64; in 32-bit mode the
analytic side is computed in float32 (tolerance 1e-4), in 64-bit mode both
sides are float64 (tolerance 1e-6). Quantile-loss targets are drawn away
from the kinks of the Huber/indicator terms so the quotient is valid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baseline, cell

TOLERANCES = {32: 1e-4, 64: 1e-6}
_FD_EPS = 1e-6


def _fd_grads(loss_fn, tensors: list[np.ndarray]) -> list[np.ndarray]:
    grads = []
    for t in tensors:
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = t[i]
            h = _FD_EPS * max(1.0, abs(float(orig)))
            t[i] = orig + h
            lp = loss_fn()
            t[i] = orig - h
            lm = loss_fn()
            t[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def _rel_err(analytic: list[np.ndarray], fd: list[np.ndarray]) -> float:
    worst = 0.0
    for ga, gf in zip(analytic, fd):
        scale = max(float(np.max(np.abs(gf))), 1e-8)
        worst = max(worst, float(np.max(np.abs(ga.astype(np.float64) - gf))) / scale)
    return worst


def _cast_cell(p: cell.CellParams, dtype) -> cell.CellParams:
    att = p.attention
    if isinstance(att, cell.FullAttention):
        att2: cell.Attention = cell.FullAttention(att.w.astype(dtype))
    else:
        att2 = cell.FactoredAttention(att.u.astype(dtype), att.v.astype(dtype), att.d_out, att.d_in)
    return cell.CellParams(p.w_in.astype(dtype), att2, p.quantiles_per_action)


def _random_cell(rng, quantiles=1, dtype=np.float64) -> tuple[cell.CellParams, np.ndarray]:
    d_in = int(rng.integers(2, 7))
    d_out = int(rng.integers(2, 7))
    actions = int(rng.integers(2, 5))
    rank = int(rng.integers(2, 5)) if rng.random() < 0.5 else None
    p = cell.init_cell(
        d_in, d_out, actions, rng, quantiles_per_action=quantiles,
        attention_rank=rank, dtype=dtype,
    )
    cell.randomize_attention(p, rng)  # generic point: training inits attention at zero
    x = rng.normal(size=d_in)
    return p, x


def suite_td(n_configs: int, bits: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(n_configs):
        p64, x = _random_cell(rng)
        head = int(rng.integers(p64.action_count))
        target = float(rng.normal())
        p = p64 if bits == 64 else _cast_cell(p64, np.float32)
        xa = x if bits == 64 else x.astype(np.float32)
        _, g = cell.cell_local_grad(p, xa, None, None, head, target)
        fd = _fd_grads(
            lambda: cell.cell_local_grad(p64, x, None, None, head, target)[0], p64.tensors()
        )
        worst = max(worst, _rel_err(g.tensors(), fd))
    return worst


def suite_quantile(n_configs: int, bits: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(n_configs):
        n_q = int(rng.integers(2, 5))
        p64, x = _random_cell(rng, quantiles=n_q)
        head = int(rng.integers(p64.action_count))
        # Targets offset from the predictions by 0.1..0.8 (quadratic branch) or
        # 1.3..2.4 (linear branch): clear of both huber kinks.
        out = cell.cell_forward(p64, x)
        theta = out.q[head]
        mag = np.where(rng.random(n_q) < 0.5, rng.uniform(0.1, 0.8, n_q), rng.uniform(1.3, 2.4, n_q))
        targets = theta + np.sign(rng.normal(size=n_q)) * mag
        p = p64 if bits == 64 else _cast_cell(p64, np.float32)
        xa = x if bits == 64 else x.astype(np.float32)
        _, g = cell.quantile_local_grad(p, xa, None, None, head, targets.astype(xa.dtype))
        fd = _fd_grads(
            lambda: cell.quantile_local_grad(p64, x, None, None, head, targets)[0], p64.tensors()
        )
        worst = max(worst, _rel_err(g.tensors(), fd))
    return worst


def suite_cross_entropy(n_configs: int, bits: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(n_configs):
        p64, x = _random_cell(rng)
        label = int(rng.integers(p64.action_count))
        p = p64 if bits == 64 else _cast_cell(p64, np.float32)
        xa = x if bits == 64 else x.astype(np.float32)
        _, g = cell.cross_entropy_local_grad(p, xa, None, None, label)
        fd = _fd_grads(
            lambda: cell.cross_entropy_local_grad(p64, x, None, None, label)[0], p64.tensors()
        )
        worst = max(worst, _rel_err(g.tensors(), fd))
    return worst


def suite_mlp(n_configs: int, bits: int, rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(n_configs):
        obs_dim = int(rng.integers(2, 6))
        hidden = tuple(int(rng.integers(2, 6)) for _ in range(int(rng.integers(1, 3))))
        actions = int(rng.integers(2, 5))
        p64 = baseline.init_mlp(obs_dim, hidden, actions, int(rng.integers(2**31)), dtype=np.float64)
        x = rng.normal(size=obs_dim)
        action = int(rng.integers(actions))
        target = float(rng.normal())
        if bits == 64:
            p = p64
            xa = x
        else:
            p = baseline.MlpParams([(w.astype(np.float32), b.astype(np.float32)) for w, b in p64.layers])
            xa = x.astype(np.float32)
        _, g = baseline.mlp_backprop(p, xa, action, target)
        fd = _fd_grads(
            lambda: baseline.mlp_backprop(p64, x, action, target)[0], p64.tensors()
        )
        worst = max(worst, _rel_err(g, fd))
    return worst


SUITES = {
    "td": suite_td,
    "quantile": suite_quantile,
    "cross_entropy": suite_cross_entropy,
    "mlp_backprop": suite_mlp,
}


@dataclass
class GradCheckReport:
    bits: int
    n_configs: int
    max_rel_err: dict[str, float]

    @property
    def tolerance(self) -> float:
        return TOLERANCES[self.bits]

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.max_rel_err.values())


def run_gradcheck(n_configs: int = 120, bits: int = 64, seed: int = 0,
                  corrupt: bool = False) -> GradCheckReport:
    """Run every suite; `corrupt` injects a known error (harness self-test)."""
    if bits not in TOLERANCES:
        raise ValueError("bits must be 32 or 64")
    results = {}
    for i, (name, fn) in enumerate(SUITES.items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        err = fn(n_configs, bits, rng) if n_configs > 0 else 0.0
        if corrupt:
            err += 1.0
        results[name] = err
    return GradCheckReport(bits=bits, n_configs=n_configs, max_rel_err=results)
