import csv
import os
import struct

import numpy as np
import pytest

from localq import analysis
from localq.cli import main, parse_seeds, read_config_file


def run_cli(*argv):
    return main(list(argv))


def tiny_train_args(out, seeds="0", extra=()):
    return [
        "train", "--env", "cartpole", "--preset", "classic", "--steps", "600",
        "--seeds", seeds, "--out", str(out),
        "--set", "batch_size=32", "--set", "layer_sizes=8,6",
        "--set", "learning_starts=64",
        "--set", "eval_every=0", "--set", "final_eval_episodes=2",
        *extra,
    ]


class TestParseHelpers:
    def test_seed_range(self):
        assert parse_seeds("0..4") == [0, 1, 2, 3, 4]

    def test_seed_list(self):
        assert parse_seeds("3,5,9") == [3, 5, 9]

    def test_config_file_comments(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nbatch_size = 64\ngamma = 0.9  # inline\n")
        assert read_config_file(p) == {"batch_size": "64", "gamma": "0.9"}


class TestTrain:
    def test_writes_artifacts(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli(*tiny_train_args(out)) == 0
        assert (out / "metrics_seed0.csv").exists()
        assert (out / "eval_seed0.csv").exists()
        assert (out / "checkpoint_seed0.ckpt").exists()
        meta = read_config_file(out / "run.meta")
        assert meta["env"] == "cartpole" and meta["steps"] == "600"
        assert meta["layer_sizes"] == "8,6"

    def test_unknown_set_key_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            run_cli(*tiny_train_args(tmp_path / "x", extra=("--set", "foo=1")))
        assert e.value.code == 2

    def test_ablation_flag_recorded_in_meta(self, tmp_path):
        out = tmp_path / "run"
        assert run_cli(*tiny_train_args(out, extra=("--set", "forward_connections=false"))) == 0
        assert read_config_file(out / "run.meta")["forward_connections"] == "false"

    def test_rerun_from_meta_is_bitwise_identical(self, tmp_path):
        out1 = tmp_path / "a"
        out2 = tmp_path / "b"
        assert run_cli(*tiny_train_args(out1)) == 0
        assert run_cli("train", "--config", str(out1 / "run.meta"), "--out", str(out2)) == 0
        a = (out1 / "metrics_seed0.csv").read_bytes()
        b = (out2 / "metrics_seed0.csv").read_bytes()
        assert a == b
        assert (out1 / "eval_seed0.csv").read_bytes() == (out2 / "eval_seed0.csv").read_bytes()
        assert (out1 / "checkpoint_seed0.ckpt").read_bytes() == (
            out2 / "checkpoint_seed0.ckpt"
        ).read_bytes()

    def test_mlp_model(self, tmp_path):
        out = tmp_path / "mlp"
        assert run_cli(
            "train", "--env", "cartpole", "--model", "mlp", "--steps", "400",
            "--seeds", "0", "--out", str(out),
            "--set", "batch_size=16", "--set", "mlp_hidden=8,6",
            "--set", "learning_starts=32",
            "--set", "eval_every=0", "--set", "final_eval_episodes=1",
        ) == 0
        header = (out / "metrics_seed0.csv").read_text().splitlines()[0]
        assert header.endswith("loss_layer_1")


class TestEval:
    def test_roundtrip(self, tmp_path, capsys):
        out = tmp_path / "run"
        run_cli(*tiny_train_args(out))
        rc = run_cli("eval", "--checkpoint", str(out / "checkpoint_seed0.ckpt"),
                     "--env", "cartpole", "--episodes", "3", "--seed", "0")
        assert rc == 0
        printed = capsys.readouterr().out
        assert "mean return" in printed

    def test_zero_episodes_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            run_cli("eval", "--checkpoint", "x", "--env", "cartpole", "--episodes", "0")
        assert e.value.code == 2

    def test_bad_checkpoint(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"not a checkpoint\n---\n")
        assert run_cli("eval", "--checkpoint", str(p), "--env", "cartpole",
                       "--episodes", "1") == 1


class TestGradcheckCommand:
    def test_passes_quickly(self):
        assert run_cli("gradcheck", "--configs", "3", "--bits", "64") == 0

    def test_corrupted_gradient_fails(self):
        assert run_cli("gradcheck", "--configs", "2", "--corrupt") == 1

    def test_zero_configs_vacuous_pass(self, capsys):
        assert run_cli("gradcheck", "--configs", "0") == 0
        assert "vacuous" in capsys.readouterr().out


def write_metrics_csv(path, steps, returns):
    with open(path, "w") as f:
        f.write("step,episode,episode_return,episode_length,epsilon,lr,loss_layer_1\n")
        for i, (s, r) in enumerate(zip(steps, returns)):
            f.write(f"{s},{i},{r!r},10,0.05,0.00025,0.1\n")


class TestAnalyze:
    def test_constant_curves_have_zero_width_ci(self, tmp_path, capsys):
        d = tmp_path / "task"
        d.mkdir()
        for seed in range(4):
            write_metrics_csv(d / f"metrics_seed{seed}.csv",
                              range(10, 1010, 10), [5.0] * 100)
        assert run_cli("analyze", str(d), "--bootstrap-samples", "200", "--no-plot") == 0
        rows = list(csv.DictReader(open(d / "summary.csv")))
        for row in rows:
            assert float(row["mean"]) == 5.0
            assert float(row["ci95_lo"]) == 5.0 and float(row["ci95_hi"]) == 5.0

    def test_bootstrap_deterministic_and_contains_mean(self, tmp_path):
        d = tmp_path / "task"
        d.mkdir()
        rng = np.random.default_rng(0)
        for seed in range(5):
            write_metrics_csv(d / f"metrics_seed{seed}.csv",
                              range(10, 510, 10), rng.normal(seed + 1, 0.5, 50).tolist())
        assert run_cli("analyze", str(d), "--no-plot") == 0
        first = (d / "summary.csv").read_bytes()
        assert run_cli("analyze", str(d), "--no-plot") == 0
        assert (d / "summary.csv").read_bytes() == first
        for row in csv.DictReader(open(d / "summary.csv")):
            assert float(row["ci95_lo"]) <= float(row["mean"]) <= float(row["ci95_hi"])

    def test_plot_renders_figure(self, tmp_path):
        d = tmp_path / "curves"
        d.mkdir()
        for seed in range(2):
            write_metrics_csv(d / f"metrics_seed{seed}.csv",
                              range(10, 310, 10), list(range(30)))
        assert run_cli("analyze", str(d), "--bootstrap-samples", "100") == 0
        assert (d / "curve_curves.png").stat().st_size > 1000

    def test_aggregates_and_iqm(self, tmp_path):
        dirs = []
        for t, final in [("t1", 10.0), ("t2", 20.0)]:
            d = tmp_path / t
            d.mkdir()
            for seed in range(2):
                write_metrics_csv(d / f"metrics_seed{seed}.csv",
                                  range(10, 210, 10), [final] * 20)
            dirs.append(str(d))
        table = tmp_path / "norm.txt"
        table.write_text("# task random reference\nt1 0 10\nt2 0 40\n")
        assert run_cli("analyze", *dirs, "--normalization", str(table),
                       "--out", str(tmp_path), "--no-plot") == 0
        rows = list(csv.DictReader(open(tmp_path / "aggregates.csv")))
        assert float(rows[0]["mean"]) == pytest.approx(0.75)  # (1.0 + 0.5) / 2
        assert int(rows[0]["n_tasks"]) == 2

    def test_iqm_quartile_trim(self):
        assert analysis.iqm([0, 10, 10, 10, 100]) == 10.0

    def test_bootstrap_ci_on_final_returns_one_to_five(self):
        values = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        lo1, hi1 = analysis.bootstrap_mean_ci(values, 10_000, np.random.default_rng(0))
        lo2, hi2 = analysis.bootstrap_mean_ci(values, 10_000, np.random.default_rng(0))
        assert (lo1, hi1) == (lo2, hi2)  # seeded resampling is deterministic
        assert lo1 <= 3.0 <= hi1

    def test_empty_input_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            run_cli("analyze")
        assert e.value.code == 2

    def test_missing_metrics_usage_error(self, tmp_path):
        d = tmp_path / "empty"
        d.mkdir()
        with pytest.raises(SystemExit) as e:
            run_cli("analyze", str(d))
        assert e.value.code == 2


class TestClassifyCommand:
    def test_end_to_end_on_synthetic_idx(self, tmp_path):
        rng = np.random.default_rng(0)
        n = 40
        imgs = np.zeros((n, 3, 3), dtype=np.uint8)
        labels = np.zeros(n, dtype=np.uint8)
        for i in range(n):
            labels[i] = i % 2
            if labels[i]:
                imgs[i, :, 2] = rng.integers(150, 255, size=3)
            else:
                imgs[i, :, 0] = rng.integers(150, 255, size=3)
        (tmp_path / "imgs").write_bytes(
            struct.pack(">IIII", 0x803, n, 3, 3) + imgs.tobytes()
        )
        (tmp_path / "labels").write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())
        out = tmp_path / "cls"
        rc = run_cli(
            "classify", "--images", str(tmp_path / "imgs"), "--labels", str(tmp_path / "labels"),
            "--layers", "8,8", "--epochs", "40", "--batch", "10", "--lr", "0.003",
            "--out", str(out),
        )
        assert rc == 0
        rows = list(csv.DictReader(open(out / "accuracy.csv")))
        assert len(rows) == 40
        assert float(rows[-1]["acc_avg"]) > 0.9

    def test_missing_file_fails(self, tmp_path):
        assert run_cli("classify", "--images", str(tmp_path / "nope"),
                       "--labels", str(tmp_path / "nope2"), "--out", str(tmp_path)) == 1
