import json

import pytest

from protoseg.cli import main


def run_cli(*args):
    return main(list(args))


def tiny_flags(tmp_path, name, extra=()):
    return [
        "--image-size", "16",
        "--num-classes", "8",
        "--num-folds", "4",
        "--fold", "0",
        "--steps", "3",
        "--eval-episodes", "8",
        "--out", str(tmp_path / name),
        *extra,
    ]


class TestExitCodes:
    def test_usage_error_is_1(self, capsys):
        assert run_cli("train", "--bogus-flag") == 1
        assert run_cli() == 1
        assert run_cli("ablate") == 1  # --suite required

    def test_config_error_is_1(self, tmp_path, capsys):
        assert run_cli("train", "--image-size", "15", "--out", str(tmp_path / "x")) == 1

    def test_missing_checkpoint_is_usage_error(self, tmp_path, capsys):
        missing = str(tmp_path / "nope.npz")
        code = run_cli("eval", "--checkpoint", missing, *tiny_flags(tmp_path, "e"))
        assert code == 1

    def test_runtime_error_is_2(self, tmp_path, capsys, monkeypatch):
        from protoseg import experiments

        def boom(config, **kwargs):
            raise RuntimeError("disk on fire")

        monkeypatch.setattr(experiments, "run_train", boom)
        assert run_cli("train", *tiny_flags(tmp_path, "rt")) == 2


class TestTrainEval:
    def test_train_then_eval(self, tmp_path, capsys):
        assert run_cli("train", *tiny_flags(tmp_path, "run")) == 0
        out = capsys.readouterr().out
        assert "checkpoint:" in out
        ckpt = tmp_path / "run" / "checkpoint.npz"
        assert ckpt.exists()
        assert (tmp_path / "run" / "config.json").exists()

        assert run_cli("eval", "--checkpoint", str(ckpt), *tiny_flags(tmp_path, "run")) == 0
        record = json.loads(capsys.readouterr().out)
        assert set(record) == {"fold", "miou", "fbiou", "per_class_iou", "n_episodes", "fingerprint"}
        assert (tmp_path / "run" / "metrics.0.json").exists()

    def test_eval_fingerprint_mismatch_exit_1_then_force(self, tmp_path, capsys):
        assert run_cli("train", *tiny_flags(tmp_path, "fp")) == 0
        ckpt = str(tmp_path / "fp" / "checkpoint.npz")
        mismatched = tiny_flags(tmp_path, "fp", extra=("--num-classes", "4"))
        assert run_cli("eval", "--checkpoint", ckpt, *mismatched) == 1
        assert run_cli("eval", "--checkpoint", ckpt, "--force", *mismatched) == 0

    def test_config_file_with_flag_override(self, tmp_path, capsys):
        from protoseg import make_run_config

        cfg = make_run_config(16, data_num_classes=8, train_steps=2, train_eval_episodes=8,
                              out_dir=str(tmp_path / "from_file"))
        path = tmp_path / "config.json"
        cfg.save(path)
        assert run_cli("train", "--config", str(path), "--steps", "1", "--out", str(tmp_path / "ovr")) == 0
        saved = json.loads((tmp_path / "ovr" / "config.json").read_text())
        assert saved["train"]["steps"] == 1
        assert saved["data"]["num_classes"] == 8


class TestAblatePlot:
    def test_ablate_and_plot(self, tmp_path, capsys):
        code = run_cli(
            "ablate", "--suite", "proto_source", "--seeds", "0",
            *tiny_flags(tmp_path, "abl", extra=("--steps", "2", "--eval-episodes", "4")),
        )
        assert code == 0
        out = capsys.readouterr().out
        summary = [line.split(": ", 1)[1] for line in out.splitlines() if line.startswith("summary:")][0]
        assert run_cli("plot", "--summary", summary, "--out", str(tmp_path / "plots")) == 0
        assert (tmp_path / "plots" / "ablation_proto_source.png").exists()

    def test_plot_checkpoint_artifacts(self, tmp_path, capsys):
        assert run_cli("train", *tiny_flags(tmp_path, "viz")) == 0
        ckpt = str(tmp_path / "viz" / "checkpoint.npz")
        code = run_cli(
            "plot", "--checkpoint", ckpt, "--episodes", "2", "--dump-episodes",
            "--out", str(tmp_path / "viz_plots"),
        )
        assert code == 0
        names = {p.name for p in (tmp_path / "viz_plots").rglob("*") if p.is_file()}
        assert {"partition_kmeans.png", "partition_spp.png", "qualitative.png"} <= names
        assert "query.png" in names  # dumped episode files

    def test_plot_without_inputs_is_usage_error(self, tmp_path, capsys):
        assert run_cli("plot", "--out", str(tmp_path / "none")) == 1
