"""Layer-local image classification and the IDX dataset container.

The same cell stack doubles as a classifier: each cell's heads become class
logits and each cell minimizes its own softmax cross-entropy through its
local analytic gradient. Images are static, so the forward-in-time channel
is disabled by default and every example is a single bottom-up pass; set
presentations > 1 to instead repeat the input over time with the recurrent
wiring active. Per-layer accuracies are reported alongside the accuracy of
the layer-averaged logits.

parse_idx reads the big-endian IDX container (magic 0x00000803 for image
tensors, 0x00000801 for label vectors) byte-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cell import xent_grad_batch
from .network import NetworkConfig, NetworkParams, network_init, step_batch, zero_state
from .numkit import adam_init, adam_step

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    """Decode one IDX byte stream into a uint8 array of the declared shape."""
    if len(data) < 4:
        raise IdxFormatError("truncated header at offset 0")
    magic = int.from_bytes(data[0:4], "big")
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise IdxFormatError(f"bad magic 0x{magic:08x} at offset 0")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise IdxFormatError(f"truncated dimension header at offset {len(data)}")
    dims = [int.from_bytes(data[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    count = 1
    for d in dims:
        if d < 0 or count * max(d, 1) > (1 << 40):
            raise IdxFormatError(f"dimension overflow in header: {dims}")
        count *= d
    payload = data[header_len:]
    if len(payload) < count:
        raise IdxFormatError(f"truncated payload at offset {header_len + len(payload)}:"
                             f" expected {count} bytes")
    if len(payload) > count:
        raise IdxFormatError(f"{len(payload) - count} trailing bytes after offset {header_len + count}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


@dataclass
class IdxDataset:
    images: np.ndarray  # (N, pixels) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return len(self.labels)


def load_idx_dataset(images_path, labels_path) -> IdxDataset:
    with open(images_path, "rb") as f:
        raw_images = parse_idx(f.read())
    with open(labels_path, "rb") as f:
        raw_labels = parse_idx(f.read())
    if raw_images.ndim != 3:
        raise IdxFormatError(f"{images_path} is not an image tensor")
    if raw_labels.ndim != 1:
        raise IdxFormatError(f"{labels_path} is not a label vector")
    if len(raw_images) != len(raw_labels):
        raise IdxFormatError(
            f"image count {len(raw_images)} != label count {len(raw_labels)}"
        )
    n = len(raw_labels)
    images = raw_images.reshape(n, -1).astype(np.float32) / 255.0
    return IdxDataset(images=images, labels=raw_labels.astype(np.int64))


@dataclass
class ClassifierRun:
    per_epoch: list[dict]          # rows: epoch, acc_layer_i..., acc_avg
    final_layer_accuracy: list[float]
    final_avg_accuracy: float


def _forward_static(params: NetworkParams, x: np.ndarray, presentations: int):
    """Bottom-up pass(es); returns per-layer inputs and logits at the last pass."""
    state = zero_state(params.config, batch=x.shape[0])
    out = None
    for _ in range(max(1, presentations)):
        out = step_batch(params, state, x, want_q=True, want_x=True)
        state = out.h
    logits = [q[:, :, 0] for q in out.q]
    return out.x, logits


def evaluate_classifier(
    params: NetworkParams, data: IdxDataset, presentations: int = 1, batch_size: int = 512
) -> tuple[list[float], float]:
    """Per-layer accuracies and the accuracy of the layer-averaged logits."""
    n_layers = len(params.cells)
    correct = np.zeros(n_layers, dtype=np.int64)
    correct_avg = 0
    for start in range(0, len(data), batch_size):
        x = data.images[start: start + batch_size]
        y = data.labels[start: start + batch_size]
        _, logits = _forward_static(params, x, presentations)
        acc_sum = None
        for l, lg in enumerate(logits):
            correct[l] += int((np.argmax(lg, axis=1) == y).sum())
            acc_sum = lg if acc_sum is None else acc_sum + lg
        correct_avg += int((np.argmax(acc_sum, axis=1) == y).sum())
    return (correct / len(data)).tolist(), correct_avg / len(data)


def train_classifier(
    train: IdxDataset,
    test: IdxDataset | None,
    layer_sizes: tuple[int, ...],
    *,
    class_count: int = 10,
    epochs: int = 30,
    batch_size: int = 128,
    lr: float = 1e-4,
    seed: int = 0,
    presentations: int = 1,
    attention_rank: int | None = None,
    metrics=None,
) -> tuple[NetworkParams, ClassifierRun]:
    """Train every cell on its own cross-entropy; report per-layer accuracy.

    The evaluation dataset defaults to the training set when test is None.
    """
    if int(train.labels.max()) >= class_count:
        raise ValueError(
            f"label {int(train.labels.max())} out of range for {class_count} classes"
        )
    cfg = NetworkConfig(
        layer_sizes=tuple(layer_sizes),
        action_count=class_count,
        obs_dim=train.images.shape[1],
        forward_connections=presentations > 1,
        quantiles_per_action=1,
        attention_rank=attention_rank,
    )
    params = network_init(cfg, seed)
    opt_states = [adam_init(c.tensors()) for c in params.cells]
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    eval_data = test if test is not None else train
    rows: list[dict] = []
    n = len(train)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start: start + batch_size]
            x = train.images[idx]
            y = train.labels[idx]
            xs, _ = _forward_static(params, x, presentations)
            for l, c in enumerate(params.cells):
                _, grad, _ = xent_grad_batch(c, xs[l], y)
                new_tensors, opt_states[l] = adam_step(
                    c.tensors(), grad.tensors(), opt_states[l], lr
                )
                c.set_tensors(new_tensors)
        layer_acc, avg_acc = evaluate_classifier(params, eval_data, presentations)
        row = {"epoch": epoch}
        for l, acc in enumerate(layer_acc):
            row[f"acc_layer_{l + 1}"] = acc
        row["acc_avg"] = avg_acc
        rows.append(row)
        if metrics is not None:
            metrics.write(row)
    layer_acc, avg_acc = evaluate_classifier(params, eval_data, presentations)
    return params, ClassifierRun(
        per_epoch=rows,
        final_layer_accuracy=layer_acc,
        final_avg_accuracy=avg_acc,
    )
