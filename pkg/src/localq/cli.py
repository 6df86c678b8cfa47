"""Command-line surface: train | eval | gradcheck | analyze | classify.

Configuration is flat `key = value` text; a run directory gets a `run.meta`
file holding every resolved setting, and feeding that file back through
`--config` reproduces the run bit-for-bit. Exit status: 0 on success, 1 when
a check fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys

import numpy as np

from . import analysis, baseline, gradcheck, supervised
from .envs import ENVIRONMENTS, make_env
from .metrics import EVAL_FIELDNAMES, CsvWriter, metrics_fieldnames
from .network import (
    CheckpointFormatError,
    NetworkConfig,
    load_network,
    network_q,
    network_step,
    read_checkpoint,
    zero_state,
)
from .trainer import PRESETS, greedy_returns, make_train_config, run_training

# every key accepted by `--set` / config files: name -> (parser, default-source)
def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes", "on"):
        return True
    if v.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _parse_sizes(v: str) -> tuple[int, ...]:
    return tuple(int(s) for s in v.split(",") if s.strip())


def _parse_opt_int(v: str):
    return None if v in ("", "none") else int(v)


TRAIN_KEYS = {
    "gamma": float,
    "batch_size": int,
    "train_freq": int,
    "target_sync": int,
    "exploration_fraction": float,
    "final_epsilon": float,
    "max_grad_norm": float,
    "seq_len": int,
    "buffer_capacity": int,
    "learning_starts": _parse_opt_int,
    "eval_every": int,
    "eval_episodes": int,
    "final_eval_episodes": int,
    "checkpoint_every": _parse_opt_int,
    "update_all_steps": _parse_bool,
    "strict_sequential": _parse_bool,
    "averaged_target_action": _parse_bool,
    "lr_kind": str,
    "peak_lr": float,
    "warmup_steps": int,
    "final_lr": float,
}

NET_KEYS = {
    "layer_sizes": _parse_sizes,
    "forward_connections": _parse_bool,
    "input_skip": _parse_bool,
    "quantiles_per_action": int,
    "attention_rank": _parse_opt_int,
    "normalize_messages": _parse_bool,
    "mlp_hidden": _parse_sizes,
}

RUN_KEYS = {
    "env": str,
    "preset": str,
    "model": str,
    "steps": int,
    "seeds": str,
}

DEFAULT_LAYERS = {
    "cartpole": (128, 96),
    "mountaincar": (128, 96),
    "acrobot": (128, 96),
    "breakout": (400, 200, 200),
}
DEFAULT_MLP = {
    "cartpole": baseline.MLP_PRESETS["classic_dqn"],
    "mountaincar": baseline.MLP_PRESETS["classic_dqn"],
    "acrobot": baseline.MLP_PRESETS["classic_dqn"],
    "breakout": baseline.MLP_PRESETS["minatar_dqn"],
}
DEFAULT_PRESET = {
    "cartpole": "classic",
    "mountaincar": "classic",
    "acrobot": "classic",
    "breakout": "minatar",
}


def parse_seeds(spec: str) -> list[int]:
    if ".." in spec:
        lo, hi = spec.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in spec.split(",") if s.strip()]


def read_config_file(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_config_file(path, values: dict) -> None:
    with open(path, "w") as f:
        for k in sorted(values):
            f.write(f"{k} = {values[k]}\n")


def _format_meta_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def _resolve_train_settings(args, parser) -> dict:
    """Merge preset defaults, config file, and --set pairs into one flat dict."""
    known = {**TRAIN_KEYS, **NET_KEYS, **RUN_KEYS}
    informational = {"command", "eval_protocol"}  # run.meta bookkeeping, not settings
    raw: dict[str, str] = {}
    if args.config:
        for k, v in read_config_file(args.config).items():
            if k in informational:
                continue
            if k not in known:
                parser.error(f"unknown config key {k!r} in {args.config}")
            raw[k] = v
    for pair in args.set or []:
        if "=" not in pair:
            parser.error(f"--set expects key=value, got {pair!r}")
        k, _, v = pair.partition("=")
        k = k.strip()
        if k not in TRAIN_KEYS and k not in NET_KEYS:
            parser.error(f"unknown --set key {k!r}")
        raw[k] = v.strip()

    settings: dict = {}
    for k, v in raw.items():
        try:
            settings[k] = known[k](v)
        except (TypeError, ValueError) as e:
            parser.error(f"bad value for {k!r}: {e}")

    # flag-level options override config-file run keys
    for k in RUN_KEYS:
        flag = getattr(args, k if k != "steps" else "steps", None)
        if flag is not None:
            settings[k] = RUN_KEYS[k](flag) if isinstance(flag, str) else flag
    return settings


def cmd_train(args, parser) -> int:
    settings = _resolve_train_settings(args, parser)
    env_name = settings.get("env")
    if env_name is None:
        parser.error("--env is required (or provide it via --config)")
    if env_name not in ENVIRONMENTS:
        parser.error(f"unknown env {env_name!r}; choose from {sorted(ENVIRONMENTS)}")
    model = settings.get("model", "cells")
    if model not in ("cells", "mlp"):
        parser.error(f"model must be cells or mlp, got {model!r}")
    preset = settings.get("preset") or DEFAULT_PRESET[env_name]
    if preset not in PRESETS:
        parser.error(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    total_steps = settings.get("steps")
    if total_steps is None:
        parser.error("--steps is required (or provide it via --config)")
    seeds = parse_seeds(settings.get("seeds", "0"))
    out_dir = args.out
    if out_dir is None:
        parser.error("--out is required")
    try:
        os.makedirs(out_dir, exist_ok=True)
        probe = os.path.join(out_dir, ".write-probe")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        print(f"error: output directory not writable: {e}", file=sys.stderr)
        return 1

    train_overrides = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
    cfg = make_train_config(preset, total_steps, **train_overrides)

    spec = ENVIRONMENTS[env_name].spec
    layer_sizes = settings.get("layer_sizes", DEFAULT_LAYERS[env_name])
    mlp_hidden = settings.get("mlp_hidden", DEFAULT_MLP[env_name])
    net_cfg = None
    if model == "cells":
        net_cfg = NetworkConfig(
            layer_sizes=tuple(layer_sizes),
            action_count=spec.action_count,
            obs_dim=spec.obs_dim,
            forward_connections=settings.get("forward_connections", True),
            input_skip=settings.get("input_skip", False),
            quantiles_per_action=settings.get("quantiles_per_action", 1),
            attention_rank=settings.get("attention_rank", None),
            normalize_messages=settings.get("normalize_messages", True),
        )

    if not args.child:
        meta = {
            "command": "train",
            "env": env_name,
            "preset": preset,
            "model": model,
            "steps": total_steps,
            "seeds": ",".join(str(s) for s in seeds),
            "eval_protocol": "greedy episodes every eval_every steps plus a final greedy block",
            # resolved training settings
            "gamma": cfg.gamma,
            "batch_size": cfg.batch_size,
            "train_freq": cfg.train_freq,
            "target_sync": cfg.target_sync,
            "exploration_fraction": cfg.exploration_fraction,
            "final_epsilon": cfg.final_epsilon,
            "max_grad_norm": cfg.max_grad_norm,
            "seq_len": cfg.seq_len,
            "buffer_capacity": cfg.buffer_capacity,
            "learning_starts": cfg.learning_starts,
            "eval_every": cfg.eval_every,
            "eval_episodes": cfg.eval_episodes,
            "final_eval_episodes": cfg.final_eval_episodes,
            "checkpoint_every": cfg.checkpoint_every,
            "update_all_steps": cfg.update_all_steps,
            "strict_sequential": cfg.strict_sequential,
            "averaged_target_action": cfg.averaged_target_action,
            "lr_kind": cfg.lr.kind,
            "peak_lr": cfg.lr.peak_lr,
            "warmup_steps": cfg.lr.warmup_steps,
            "final_lr": cfg.lr.final_lr,
            "mlp_hidden": mlp_hidden,
        }
        if net_cfg is not None:
            meta.update(
                layer_sizes=net_cfg.layer_sizes,
                forward_connections=net_cfg.forward_connections,
                input_skip=net_cfg.input_skip,
                quantiles_per_action=net_cfg.quantiles_per_action,
                attention_rank=net_cfg.attention_rank,
                normalize_messages=net_cfg.normalize_messages,
            )
        write_config_file(
            os.path.join(out_dir, "run.meta"),
            {k: _format_meta_value(v) for k, v in meta.items()},
        )

    if args.workers > 1 and len(seeds) > 1:
        return _fan_out(args, seeds, out_dir)

    n_layers = len(layer_sizes) if model == "cells" else 1
    for seed in seeds:
        metrics_path = os.path.join(out_dir, f"metrics_seed{seed}.csv")
        eval_path = os.path.join(out_dir, f"eval_seed{seed}.csv")
        ckpt_path = os.path.join(out_dir, f"checkpoint_seed{seed}.ckpt")
        with CsvWriter(metrics_path, metrics_fieldnames(n_layers)) as mw, CsvWriter(
            eval_path, EVAL_FIELDNAMES
        ) as ew:
            run_training(
                lambda: make_env(env_name),
                net_cfg,
                cfg,
                seed,
                model=model,
                mlp_hidden=tuple(mlp_hidden),
                metrics=mw,
                eval_metrics=ew,
                checkpoint_path=ckpt_path,
            )
        print(f"seed {seed}: wrote {metrics_path}")
    return 0


def _fan_out(args, seeds: list[int], out_dir: str) -> int:
    """One subprocess per seed, at most --workers concurrently."""
    base = [sys.executable, "-m", "localq.cli", "train", "--out", out_dir, "--workers", "1",
            "--_child"]
    passthrough = []
    if args.config:
        passthrough += ["--config", args.config]
    for key in ("env", "preset", "model", "steps"):
        v = getattr(args, key, None)
        if v is not None:
            passthrough += [f"--{key}", str(v)]
    for pair in args.set or []:
        passthrough += ["--set", pair]
    child_env = dict(os.environ, OPENBLAS_NUM_THREADS="1", OMP_NUM_THREADS="1")
    pending = list(seeds)
    running: list[tuple[int, subprocess.Popen]] = []
    failed = []
    while pending or running:
        while pending and len(running) < args.workers:
            seed = pending.pop(0)
            proc = subprocess.Popen(base + passthrough + ["--seeds", str(seed)], env=child_env)
            running.append((seed, proc))
        seed, proc = running.pop(0)
        rc = proc.wait()
        if rc != 0:
            failed.append(seed)
    if failed:
        print(f"error: seeds {failed} failed", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args, parser) -> int:
    if args.episodes <= 0:
        parser.error("--episodes must be >= 1")
    try:
        kind, _, _ = read_checkpoint(args.checkpoint)
    except (OSError, CheckpointFormatError) as e:
        print(f"error: cannot read checkpoint: {e}", file=sys.stderr)
        return 1
    env = make_env(args.env)
    if kind == "cells":
        params = load_network(args.checkpoint)
        if params.config.obs_dim != env.spec.obs_dim:
            print("error: checkpoint does not match this environment", file=sys.stderr)
            return 1

        def act(obs, state):
            q, new_state = network_step(params, state, obs)
            return int(np.argmax(network_q(q))), new_state

        def init_state():
            return zero_state(params.config)

    elif kind == "mlp":
        params = baseline.load_mlp(args.checkpoint)

        def act(obs, state):
            return int(np.argmax(baseline.mlp_forward(params, obs))), None

        def init_state():
            return None

    else:
        print(f"error: unknown checkpoint kind {kind!r}", file=sys.stderr)
        return 1
    results = greedy_returns(act, init_state, env, args.episodes, args.seed)
    returns = [r for r, _ in results]
    print(f"episodes: {len(returns)}")
    print(f"mean return: {np.mean(returns)!r}")
    print(f"min return: {min(returns)!r}")
    print(f"max return: {max(returns)!r}")
    return 0


def cmd_gradcheck(args, parser) -> int:
    report = gradcheck.run_gradcheck(
        n_configs=args.configs, bits=args.bits, seed=args.seed, corrupt=args.corrupt
    )
    if args.configs == 0:
        print("warning: 0 configurations requested; vacuous pass")
    for name, err in report.max_rel_err.items():
        status = "ok" if err < report.tolerance else "FAIL"
        print(f"{name}: max relative error {err:.3e} (tolerance {report.tolerance:.0e}) {status}")
    if not report.passed:
        print("gradcheck FAILED", file=sys.stderr)
        return 1
    print("gradcheck passed")
    return 0


def cmd_analyze(args, parser) -> int:
    import glob

    if not args.dirs:
        parser.error("at least one run directory is required")
    final_scores: dict[str, float] = {}
    for d in args.dirs:
        paths = sorted(glob.glob(os.path.join(d, "metrics_seed*.csv")))
        if not paths:
            parser.error(f"no metrics_seed*.csv files in {d}")
        summary = analysis.summarize_runs(
            paths, bins=args.bins, n_resamples=args.bootstrap_samples, seed=args.seed
        )
        if summary.warned_grid:
            print(f"warning: {d}: seeds have different step ranges; resampled to a common grid")
        out_dir = args.out or d
        os.makedirs(out_dir, exist_ok=True)
        name = os.path.basename(os.path.normpath(d))
        summary_path = os.path.join(out_dir, "summary.csv" if args.out is None or len(args.dirs) == 1
                                    else f"summary_{name}.csv")
        analysis.write_summary_csv(summary_path, summary)
        if args.plot:
            analysis.render_curve_figure(
                os.path.join(out_dir, f"curve_{name}.png"), summary, title=name
            )
        # final score: per-seed mean over the last 100 episodes, then across seeds
        finals = []
        for p in paths:
            curve = analysis.read_metrics_csv(p)
            returns = curve["episode_return"]
            finals.append(float(np.mean(returns[-100:])))
        final_scores[name] = float(np.mean(finals))
        print(f"{d}: wrote {summary_path} (final score {final_scores[name]:.3f})")
    if args.normalization:
        table = analysis.read_normalization_table(args.normalization)
        stats = analysis.aggregate_tasks(final_scores, table)
        out_dir = args.out or args.dirs[0]
        agg_path = os.path.join(out_dir, "aggregates.csv")
        with open(agg_path, "w") as f:
            f.write("mean,median,iqm,n_tasks\n")
            f.write(f"{stats['mean']!r},{stats['median']!r},{stats['iqm']!r},{stats['n_tasks']}\n")
        if args.plot:
            analysis.render_aggregate_figure(os.path.join(out_dir, "aggregates.png"), stats)
        print(f"aggregates: mean {stats['mean']:.3f} median {stats['median']:.3f} "
              f"iqm {stats['iqm']:.3f} -> {agg_path}")
    return 0


def cmd_classify(args, parser) -> int:
    try:
        train = supervised.load_idx_dataset(args.images, args.labels)
        test = (
            supervised.load_idx_dataset(args.test_images, args.test_labels)
            if args.test_images
            else None
        )
    except (OSError, supervised.IdxFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    os.makedirs(args.out, exist_ok=True)
    layers = _parse_sizes(args.layers)
    fields = ["epoch"] + [f"acc_layer_{i + 1}" for i in range(len(layers))] + ["acc_avg"]
    with CsvWriter(os.path.join(args.out, "accuracy.csv"), fields) as mw:
        _, run = supervised.train_classifier(
            train,
            test,
            layers,
            epochs=args.epochs,
            batch_size=args.batch,
            lr=args.lr,
            seed=args.seed,
            presentations=args.presentations,
            metrics=mw,
        )
    for l, acc in enumerate(run.final_layer_accuracy):
        print(f"layer {l + 1} accuracy: {acc:.4f}")
    print(f"layer-averaged accuracy: {run.final_avg_accuracy:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent (cells or baseline mlp)")
    t.add_argument("--env", choices=sorted(ENVIRONMENTS), default=None)
    t.add_argument("--preset", choices=sorted(PRESETS), default=None)
    t.add_argument("--model", choices=["cells", "mlp"], default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seeds", type=str, default=None, help="e.g. 0..4 or 0,2,5")
    t.add_argument("--out", type=str, default=None)
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--config", type=str, default=None, help="key = value file (e.g. a run.meta)")
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--_child", dest="child", action="store_true", help=argparse.SUPPRESS)

    e = sub.add_parser("eval", help="greedy-evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--env", choices=sorted(ENVIRONMENTS), required=True)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--configs", type=int, default=120)
    g.add_argument("--bits", type=int, choices=[32, 64], default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)

    a = sub.add_parser("analyze", help="summarize run directories")
    a.add_argument("dirs", nargs="*")
    a.add_argument("--bins", type=int, default=100)
    a.add_argument("--bootstrap-samples", type=int, default=10_000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", type=str, default=None)
    a.add_argument("--normalization", type=str, default=None,
                   help="text table: task random_score reference_score")
    a.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)

    c = sub.add_parser("classify", help="train the layer-local classifier on IDX data")
    c.add_argument("--images", required=True)
    c.add_argument("--labels", required=True)
    c.add_argument("--test-images", default=None)
    c.add_argument("--test-labels", default=None)
    c.add_argument("--layers", type=str, default="500,500,500,500")
    c.add_argument("--epochs", type=int, default=30)
    c.add_argument("--batch", type=int, default=128)
    c.add_argument("--lr", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--presentations", type=int, default=1)
    c.add_argument("--out", type=str, default=".")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
        "analyze": cmd_analyze,
        "classify": cmd_classify,
    }
    return handlers[args.command](args, parser)


if __name__ == "__main__":
    sys.exit(main())
