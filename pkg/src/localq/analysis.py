"""Curve summaries and cross-task aggregates for finished runs.

Per run directory: each seed's episode returns are resampled onto a common
step grid (bucket means, forward-filled), then each grid point gets the
across-seed mean, standard error, and a seeded percentile-bootstrap 95%
confidence interval of the mean. Across tasks, final normalized scores are
reduced to mean, median, and interquartile mean. Learning-curve figures are
rendered alongside the CSV output.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    with open(path) as f:
        reader = csv.DictReader(f)
        rows = list(reader)
    if not rows:
        return {"step": np.empty(0), "episode_return": np.empty(0)}
    def col(name, dtype=float):
        return np.array([dtype(r[name]) if r[name] != "" else math.nan for r in rows])
    return {
        "step": col("step"),
        "episode_return": col("episode_return"),
    }


def resample_curve(steps: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Bucket means on (prev, g] intervals, forward/backward filled."""
    out = np.full(len(grid), np.nan)
    prev = -np.inf
    for i, g in enumerate(grid):
        mask = (steps > prev) & (steps <= g)
        if mask.any():
            out[i] = float(values[mask].mean())
        prev = g
    # forward fill, then backfill any leading gap
    last = np.nan
    for i in range(len(out)):
        if math.isnan(out[i]):
            out[i] = last
        else:
            last = out[i]
    first_valid = next((v for v in out if not math.isnan(v)), np.nan)
    for i in range(len(out)):
        if math.isnan(out[i]):
            out[i] = first_valid
        else:
            break
    return out


def bootstrap_mean_ci(
    values: np.ndarray, n_resamples: int, rng: np.random.Generator, level: float = 0.95
) -> tuple[float, float]:
    """Percentile bootstrap CI of the mean (resampling with replacement)."""
    n = len(values)
    idx = rng.integers(0, n, size=(n_resamples, n))
    means = values[idx].mean(axis=1)
    alpha = 100.0 * (1.0 - level) / 2.0
    return float(np.percentile(means, alpha)), float(np.percentile(means, 100.0 - alpha))


def iqm(values) -> float:
    """Interquartile mean: drop floor(n/4) low and high scores, average the rest."""
    v = np.sort(np.asarray(values, dtype=float))
    k = int(math.floor(len(v) * 0.25))
    trimmed = v[k: len(v) - k] if len(v) - 2 * k > 0 else v
    return float(trimmed.mean())


@dataclass
class RunSummary:
    grid: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_seeds: int
    per_seed: np.ndarray  # (n_seeds, len(grid))
    warned_grid: bool


def summarize_runs(
    csv_paths: list,
    bins: int = 100,
    n_resamples: int = 10_000,
    seed: int = 0,
) -> RunSummary:
    curves = [read_metrics_csv(p) for p in csv_paths]
    curves = [c for c in curves if len(c["step"])]
    if not curves:
        raise ValueError("no episode rows found in the metrics files")
    max_steps = [float(c["step"].max()) for c in curves]
    warned = len(set(max_steps)) > 1
    grid = np.linspace(0.0, max(max_steps), bins + 1)[1:]
    per_seed = np.stack([resample_curve(c["step"], c["episode_return"], grid) for c in curves])
    n = per_seed.shape[0]
    mean = per_seed.mean(axis=0)
    stderr = (
        per_seed.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    )
    rng = np.random.default_rng(seed)
    ci = np.array([bootstrap_mean_ci(per_seed[:, i], n_resamples, rng) for i in range(len(grid))])
    return RunSummary(
        grid=grid,
        mean=mean,
        stderr=stderr,
        ci_lo=ci[:, 0],
        ci_hi=ci[:, 1],
        n_seeds=n,
        per_seed=per_seed,
        warned_grid=warned,
    )


def write_summary_csv(path, s: RunSummary) -> None:
    with open(path, "w") as f:
        f.write("step,mean,stderr,ci95_lo,ci95_hi,n_seeds\n")
        for i in range(len(s.grid)):
            f.write(
                f"{float(s.grid[i])!r},{float(s.mean[i])!r},{float(s.stderr[i])!r},"
                f"{float(s.ci_lo[i])!r},{float(s.ci_hi[i])!r},{s.n_seeds}\n"
            )


def render_curve_figure(path, s: RunSummary, title: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(s.grid, s.ci_lo, s.ci_hi, alpha=0.25, label="95% bootstrap CI")
    ax.plot(s.grid, s.mean, lw=1.5, label=f"mean over {s.n_seeds} seeds")
    for row in s.per_seed:
        ax.plot(s.grid, row, lw=0.5, alpha=0.35)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("episode return")
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def read_normalization_table(path) -> dict[str, tuple[float, float]]:
    """Lines of `task random_score reference_score`, # comments allowed."""
    table = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, lo, hi = line.split()
            table[name] = (float(lo), float(hi))
    return table


def normalized_score(x: float, random_score: float, reference_score: float) -> float:
    return (x - random_score) / (reference_score - random_score)


def aggregate_tasks(final_scores: dict[str, float], table: dict[str, tuple[float, float]]):
    """Mean / median / IQM of normalized final scores across tasks."""
    normalized = []
    for task, score in sorted(final_scores.items()):
        if task not in table:
            raise ValueError(f"no normalization entry for task {task!r}")
        normalized.append(normalized_score(score, *table[task]))
    arr = np.array(normalized)
    return {
        "mean": float(arr.mean()),
        "median": float(np.median(arr)),
        "iqm": iqm(arr),
        "n_tasks": len(arr),
    }


def render_aggregate_figure(path, stats: dict) -> None:
    fig, ax = plt.subplots(figsize=(4, 3))
    keys = ["mean", "median", "iqm"]
    ax.bar(keys, [stats[k] for k in keys], color=["#4477aa", "#66ccee", "#228833"])
    ax.set_ylabel("normalized score")
    ax.set_title(f"aggregate over {stats['n_tasks']} tasks")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
