"""CSV row sinks for training and evaluation metrics.

Values are written with repr() of the Python float (shortest round-trip
form), so identical runs produce byte-identical files.
"""

from __future__ import annotations

import numpy as np


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


class CsvWriter:
    def __init__(self, path, fieldnames: list[str]):
        self.path = path
        self.fieldnames = fieldnames
        self._f = open(path, "w", buffering=1)
        self._f.write(",".join(fieldnames) + "\n")

    def write(self, row: dict) -> None:
        self._f.write(",".join(format_value(row.get(k)) for k in self.fieldnames) + "\n")

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def metrics_fieldnames(n_layers: int) -> list[str]:
    return [
        "step",
        "episode",
        "episode_return",
        "episode_length",
        "epsilon",
        "lr",
    ] + [f"loss_layer_{i + 1}" for i in range(n_layers)]


EVAL_FIELDNAMES = ["step", "phase", "episode", "return", "length"]
