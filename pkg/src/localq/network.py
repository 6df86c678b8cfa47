"""Stacked value cells with forward-in-time connections.

Within one timestep the cells are evaluated bottom-up: cell l consumes the
activations of cell l-1 (the observation for l=1) plus, when forward
connections are enabled, the activations of cell l+1 from the *previous*
timestep. The top cell receives no previous-step input. Activations are the
only signal that crosses cells; predictions and errors stay inside each cell.

A NetworkState is the list of last-step activations carried forward. It is
zeroed at every episode start, and because cells have no bias terms a zero
observation driven through a zero state leaves every activation at exactly
zero, which the trainer exploits when padding burn-in windows.

Inference averages the per-cell predictions: the final Q-vector is the
arithmetic mean over layers of each layer's quantile-mean, accumulated in
fixed layer order (documented so tests can pin it bit-for-bit).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import cell as cellmod
from .cell import CellParams, init_cell
from .numkit import DEFAULT_DTYPE


@dataclass(frozen=True)
class NetworkConfig:
    layer_sizes: tuple[int, ...]
    action_count: int
    obs_dim: int
    forward_connections: bool = True
    input_skip: bool = False
    quantiles_per_action: int = 1
    attention_rank: int | None = None
    normalize_messages: bool = True

    def __post_init__(self):
        if len(self.layer_sizes) < 1:
            raise ValueError("need at least one layer")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be >= 1")
        if self.action_count < 1 or self.obs_dim < 1 or self.quantiles_per_action < 1:
            raise ValueError("action_count, obs_dim and quantiles_per_action must be >= 1")


@dataclass
class NetworkParams:
    config: NetworkConfig
    cells: list[CellParams]


def cell_input_dim(cfg: NetworkConfig, layer: int) -> int:
    """Input width of cell `layer` (0-based) under the wiring rules."""
    n_layers = len(cfg.layer_sizes)
    d = cfg.obs_dim if layer == 0 else cfg.layer_sizes[layer - 1]
    if cfg.forward_connections and layer < n_layers - 1:
        d += cfg.layer_sizes[layer + 1]
    if cfg.input_skip and layer > 0:
        d += cfg.obs_dim
    return d


def network_init(cfg: NetworkConfig, seed: int, dtype=DEFAULT_DTYPE) -> NetworkParams:
    rng = np.random.default_rng(seed)
    cells = [
        init_cell(
            d_in=cell_input_dim(cfg, l),
            d_out=cfg.layer_sizes[l],
            action_count=cfg.action_count,
            rng=rng,
            quantiles_per_action=cfg.quantiles_per_action,
            attention_rank=cfg.attention_rank,
            dtype=dtype,
        )
        for l in range(len(cfg.layer_sizes))
    ]
    return NetworkParams(config=cfg, cells=cells)


def zero_state(cfg: NetworkConfig, batch: int | None = None, dtype=DEFAULT_DTYPE) -> list[np.ndarray]:
    """Fresh episode state: all previous-step activations are zero."""
    if batch is None:
        return [np.zeros(s, dtype=dtype) for s in cfg.layer_sizes]
    return [np.zeros((batch, s), dtype=dtype) for s in cfg.layer_sizes]


def _cell_inputs_batch(
    cfg: NetworkConfig,
    layer: int,
    obs: np.ndarray,
    below: np.ndarray,
    state: list[np.ndarray],
) -> np.ndarray:
    n_layers = len(cfg.layer_sizes)
    parts = [below]
    if cfg.forward_connections and layer < n_layers - 1:
        parts.append(state[layer + 1])
    if cfg.input_skip and layer > 0:
        parts.append(obs)
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=1)


def normalize_message(h: np.ndarray) -> np.ndarray:
    """Scale activations to unit root-mean-square before they leave the cell.

    Inter-cell messages carry direction, not magnitude: without this, each
    cell's value scale multiplies into the cells it feeds (upward within the
    step, downward through time) and the TD bootstrap amplifies the loop
    without bound. Predictions always use the cell's own raw activations.
    Zero vectors stay exactly zero (episode-start padding relies on it).
    """
    rms = np.sqrt(np.mean(np.square(h), axis=-1, keepdims=True))
    return h / (rms + 1e-6)


@dataclass
class StepOutput:
    h: list[np.ndarray]                 # per-layer outgoing messages at this step
    q: list[np.ndarray] | None = None   # per-layer (B, A, quantiles)
    x: list[np.ndarray] | None = None   # per-layer concatenated cell inputs


def step_batch(
    params: NetworkParams,
    state: list[np.ndarray],
    obs: np.ndarray,
    want_q: bool = True,
    want_x: bool = False,
) -> StepOutput:
    """One bottom-up pass over row-stacked observations (B, obs_dim).

    `state` and the returned .h hold the messages cells exchange (normalized
    when the config says so); predictions are computed from raw activations.
    """
    cfg = params.config
    if obs.ndim != 2 or obs.shape[1] != cfg.obs_dim:
        raise ValueError(f"expected (B, {cfg.obs_dim}) observations, got {obs.shape}")
    hs: list[np.ndarray] = []
    qs: list[np.ndarray] | None = [] if want_q else None
    xs: list[np.ndarray] | None = [] if want_x else None
    below = obs
    for layer, p in enumerate(params.cells):
        x = _cell_inputs_batch(cfg, layer, obs, below, state)
        if want_q:
            h, q = cellmod.forward_batch(p, x)
            qs.append(q)
        else:
            _, h = cellmod.hidden_batch(p, x)
        if want_x:
            xs.append(x)
        msg = normalize_message(h) if cfg.normalize_messages else h
        hs.append(msg)
        below = msg
    return StepOutput(h=hs, q=qs, x=xs)


def network_step(
    params: NetworkParams,
    state: list[np.ndarray],
    obs: np.ndarray,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Single-vector step: returns (per-layer q matrices, new state)."""
    obs = np.asarray(obs)
    if obs.ndim != 1:
        raise ValueError("network_step takes a single observation vector")
    out = step_batch(params, [s[None, :] for s in state], obs[None, :], want_q=True)
    return [q[0] for q in out.q], [h[0] for h in out.h]


def quantile_mean(q: np.ndarray) -> np.ndarray:
    """Mean over the trailing quantile axis, accumulated in index order."""
    n = q.shape[-1]
    acc = q[..., 0]
    for i in range(1, n):
        acc = acc + q[..., i]
    return acc / n


def network_q(per_layer_q: list[np.ndarray]) -> np.ndarray:
    """Layer-averaged Q-vector, accumulated in layer order then divided once."""
    if len(per_layer_q) == 0:
        raise ValueError("need at least one layer of predictions")
    acc = quantile_mean(per_layer_q[0])
    for q in per_layer_q[1:]:
        acc = acc + quantile_mean(q)
    return acc / len(per_layer_q)


def unroll(
    params: NetworkParams,
    obs_seq: list[np.ndarray],
    initial_state: list[np.ndarray],
) -> tuple[list[list[np.ndarray]], list[list[np.ndarray]]]:
    """Repeated network_step; returns (state after each step, per-layer q per step)."""
    if len(obs_seq) == 0:
        raise ValueError("obs_seq must be non-empty")
    states, qs = [], []
    state = initial_state
    for obs in obs_seq:
        q, state = network_step(params, state, obs)
        states.append(state)
        qs.append(q)
    return states, qs


def clone_params(params: NetworkParams) -> NetworkParams:
    """Deep copy of all weight tensors (used for target-network snapshots)."""
    cells = []
    for c in params.cells:
        att = c.attention
        if isinstance(att, cellmod.FullAttention):
            att2: cellmod.Attention = cellmod.FullAttention(att.w.copy())
        else:
            att2 = cellmod.FactoredAttention(att.u.copy(), att.v.copy(), att.d_out, att.d_in)
        cells.append(CellParams(c.w_in.copy(), att2, c.quantiles_per_action))
    return NetworkParams(config=params.config, cells=cells)


# ---------------------------------------------------------------------------
# Checkpoint container: text header + raw little-endian float32 tensors.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "localq-checkpoint"
CHECKPOINT_VERSION = 1
_HEADER_END = "---"


class CheckpointFormatError(ValueError):
    pass


def write_checkpoint(path, kind: str, meta: dict[str, str], tensors: list[tuple[str, np.ndarray]]):
    buf = io.StringIO()
    buf.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n")
    buf.write(f"kind = {kind}\n")
    for k in sorted(meta):
        buf.write(f"{k} = {meta[k]}\n")
    for i, (name, t) in enumerate(tensors):
        dims = " ".join(str(d) for d in t.shape)
        buf.write(f"tensor.{i} = {name} {dims}\n")
    buf.write(_HEADER_END + "\n")
    with open(path, "wb") as f:
        f.write(buf.getvalue().encode("utf-8"))
        for _, t in tensors:
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[str, dict[str, str], list[tuple[str, np.ndarray]]]:
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find((_HEADER_END + "\n").encode("utf-8"))
    if end < 0:
        raise CheckpointFormatError("missing header terminator")
    header = raw[:end].decode("utf-8").splitlines()
    body = raw[end + len(_HEADER_END) + 1:]
    if not header or not header[0].startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError("not a checkpoint file")
    version = header[0].split()[1]
    if int(version) != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    meta: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...]]] = []
    kind = ""
    for line in header[1:]:
        key, _, value = line.partition(" = ")
        if key == "kind":
            kind = value
        elif key.startswith("tensor."):
            parts = value.split()
            manifest.append((parts[0], tuple(int(d) for d in parts[1:])))
        else:
            meta[key] = value
    tensors: list[tuple[str, np.ndarray]] = []
    offset = 0
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * 4
        if offset + nbytes > len(body):
            raise CheckpointFormatError(f"truncated tensor data at byte {end + offset}")
        arr = np.frombuffer(body[offset:offset + nbytes], dtype="<f4").reshape(shape).copy()
        tensors.append((name, arr))
        offset += nbytes
    if offset != len(body):
        raise CheckpointFormatError(f"{len(body) - offset} trailing bytes after tensor data")
    return kind, meta, tensors


def _config_meta(cfg: NetworkConfig) -> dict[str, str]:
    return {
        "layer_sizes": ",".join(str(s) for s in cfg.layer_sizes),
        "action_count": str(cfg.action_count),
        "obs_dim": str(cfg.obs_dim),
        "forward_connections": str(cfg.forward_connections).lower(),
        "input_skip": str(cfg.input_skip).lower(),
        "quantiles_per_action": str(cfg.quantiles_per_action),
        "attention_rank": "" if cfg.attention_rank is None else str(cfg.attention_rank),
        "normalize_messages": str(cfg.normalize_messages).lower(),
    }


def _config_from_meta(meta: dict[str, str]) -> NetworkConfig:
    return NetworkConfig(
        layer_sizes=tuple(int(s) for s in meta["layer_sizes"].split(",")),
        action_count=int(meta["action_count"]),
        obs_dim=int(meta["obs_dim"]),
        forward_connections=meta["forward_connections"] == "true",
        input_skip=meta["input_skip"] == "true",
        quantiles_per_action=int(meta["quantiles_per_action"]),
        attention_rank=None if meta["attention_rank"] == "" else int(meta["attention_rank"]),
        normalize_messages=meta.get("normalize_messages", "true") == "true",
    )


def save_network(path, params: NetworkParams) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    for i, c in enumerate(params.cells):
        names = (
            [f"cell{i}.w_in", f"cell{i}.att.w"]
            if isinstance(c.attention, cellmod.FullAttention)
            else [f"cell{i}.w_in", f"cell{i}.att.u", f"cell{i}.att.v"]
        )
        tensors.extend(zip(names, c.tensors()))
    write_checkpoint(path, "cells", _config_meta(params.config), tensors)


def load_network(path) -> NetworkParams:
    kind, meta, tensors = read_checkpoint(path)
    if kind != "cells":
        raise CheckpointFormatError(f"expected a cell-network checkpoint, got kind={kind!r}")
    cfg = _config_from_meta(meta)
    params = network_init(cfg, seed=0)
    by_name = dict(tensors)
    for i, c in enumerate(params.cells):
        if isinstance(c.attention, cellmod.FullAttention):
            c.set_tensors([by_name[f"cell{i}.w_in"], by_name[f"cell{i}.att.w"]])
        else:
            c.set_tensors(
                [by_name[f"cell{i}.w_in"], by_name[f"cell{i}.att.u"], by_name[f"cell{i}.att.v"]]
            )
    return params
