import dataclasses
import json

import numpy as np
import pytest
import torch

from protoseg import make_run_config
from protoseg.errors import CheckpointError, ConfigError, ContractError
from protoseg.experiments import (
    ablation_cells,
    run_ablation,
    run_eval,
    run_train,
    summarize_rows,
)
from protoseg.head import init_train_state, load_checkpoint
from protoseg.metrics import MetricsReport


def tiny(tmp_path, name, **overrides):
    defaults = dict(
        data_num_classes=8,
        backbone_stage_channels=(4, 6, 6),
        head_hidden_channels=8,
        train_steps=4,
        train_eval_episodes=8,
        train_checkpoint_every=0,
        out_dir=str(tmp_path / name),
    )
    defaults.update(overrides)
    return make_run_config(16, **defaults)


def params_of(path):
    return load_checkpoint(path).parameters()


class TestRunTrain:
    def test_deterministic_across_runs(self, tmp_path):
        ck_a, _ = run_train(tiny(tmp_path, "a", train_steps=10))
        ck_b, _ = run_train(tiny(tmp_path, "b", train_steps=10))
        for pa, pb in zip(params_of(ck_a), params_of(ck_b)):
            assert torch.equal(pa, pb)

    def test_zero_steps_equals_initialization(self, tmp_path):
        cfg = tiny(tmp_path, "zero", train_steps=0)
        ck, _ = run_train(cfg)
        fresh = init_train_state(cfg)
        for saved, init in zip(params_of(ck), fresh.parameters()):
            assert torch.equal(saved, init)

    def test_log_schema(self, tmp_path):
        _, log = run_train(tiny(tmp_path, "log"))
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == 4
        assert all(set(r) == {"step", "loss", "skips", "wall_time_s"} for r in records)

    def test_lam_zero_not_slower_than_full(self, tmp_path):
        _, log0 = run_train(tiny(tmp_path, "t0", method_lam=0.0, train_steps=30))
        _, log5 = run_train(tiny(tmp_path, "t5", method_lam=0.5, train_steps=30))

        def median_step(path):
            times = [json.loads(line)["wall_time_s"] for line in path.read_text().splitlines()]
            return float(np.median(times))

        assert median_step(log0) <= 1.15 * median_step(log5)

    def test_n0_run_identical_to_lam0_run(self, tmp_path):
        ck_n0, _ = run_train(tiny(tmp_path, "n0", method_num_prototypes=0, method_lam=0.5, train_steps=6))
        ck_l0, _ = run_train(tiny(tmp_path, "l0", method_lam=0.0, train_steps=6))
        for pa, pb in zip(params_of(ck_n0), params_of(ck_l0)):
            assert torch.equal(pa, pb)


class TestRunEval:
    def test_untrained_model_near_chance(self, tmp_path):
        mious = []
        for seed in range(3):
            cfg = tiny(tmp_path, f"chance{seed}", train_steps=0, train_seed=seed, train_eval_episodes=16)
            ck, _ = run_train(cfg)
            mious.append(run_eval(ck, cfg).miou)
        # random comparison heads segment at or below the foreground rate
        assert all(m <= 0.4 for m in mious)

    def test_eval_deterministic_and_written(self, tmp_path):
        cfg = tiny(tmp_path, "det")
        ck, _ = run_train(cfg)
        a = run_eval(ck, cfg)
        b = run_eval(ck, cfg)
        assert a == b
        record = json.loads((tmp_path / "det" / "metrics.0.json").read_text())
        assert MetricsReport.from_dict(record) == a
        assert record["n_episodes"] == 8 and record["fold"] == 0

    def test_fingerprint_guard(self, tmp_path):
        cfg = tiny(tmp_path, "fp")
        ck, _ = run_train(cfg)
        other = tiny(tmp_path, "fp2", data_num_classes=4)
        with pytest.raises(CheckpointError):
            run_eval(ck, other)
        report = run_eval(ck, other, force=True)
        assert report.n_episodes == 8

    def test_needs_enough_episodes_for_novel_classes(self, tmp_path):
        cfg = tiny(tmp_path, "few", train_eval_episodes=1)
        ck, _ = run_train(cfg)
        with pytest.raises(ConfigError):
            run_eval(ck, cfg)


class TestAblation:
    def test_grids_match_study_design(self):
        base = make_run_config(16).method
        assert [c for c, _ in ablation_cells("n_sweep", base)] == [f"n={n}" for n in (0, 1, 2, 3, 4, 5)]
        lams = [m.lam for _, m in ablation_cells("lambda_sweep", base)]
        assert lams == [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]
        partition = dict(ablation_cells("partition", base))
        assert set(partition) == {"baseline", "kmeans_n3", "spp_a2", "spp_a3", "spp_a4", "spp_a5"}
        assert partition["spp_a4"].spp_bins == 4 and partition["spp_a4"].partition == "spp"
        sources = dict(ablation_cells("proto_source", base))
        assert sources["fig1a_baseline"].lam == 0.0
        assert sources["fig1b_support1"].proto_source == "support"
        assert sources["fig1b_support1"].num_prototypes == 1
        assert sources["fig1c_query1"].num_prototypes == 1
        assert sources["fig1d_full"].num_prototypes == 3
        with pytest.raises(ConfigError):
            ablation_cells("bogus", base)

    def test_suite_runs_and_emits_files(self, tmp_path):
        base = tiny(tmp_path, "abl", train_steps=2, train_eval_episodes=4)
        result = run_ablation("proto_source", base, seeds=(0, 1), out_dir=tmp_path / "out")
        assert result.table_path.exists() and result.summary_path.exists() and result.plot_path.exists()
        header = result.table_path.read_text().splitlines()[0]
        assert header == "suite,cell,seed,miou,fbiou,n_episodes,error"
        sheader = result.summary_path.read_text().splitlines()[0]
        assert sheader == "suite,cell,median_miou,iqr_low,iqr_high,n_seeds"
        assert len(result.rows) == 4 * 2
        assert all(row["error"] == "" for row in result.rows)

    def test_tables_byte_identical_across_repeats(self, tmp_path):
        base = tiny(tmp_path, "abl2", train_steps=2, train_eval_episodes=4)
        r1 = run_ablation("proto_source", base, seeds=(0,), out_dir=tmp_path / "o1")
        r2 = run_ablation("proto_source", base, seeds=(0,), out_dir=tmp_path / "o2")
        assert r1.table_path.read_bytes() == r2.table_path.read_bytes()
        assert r1.summary_path.read_bytes() == r2.summary_path.read_bytes()

    def test_cell_failures_recorded_suite_completes(self, tmp_path, monkeypatch):
        base = tiny(tmp_path, "abl3", train_steps=2, train_eval_episodes=4)
        from protoseg import experiments as exp

        real = exp.run_train
        calls = {"n": 0}

        def flaky(config, **kwargs):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("boom")
            return real(config, **kwargs)

        monkeypatch.setattr(exp, "run_train", flaky)
        result = run_ablation("proto_source", base, seeds=(0,), out_dir=tmp_path / "o3")
        errors = [row["error"] for row in result.rows]
        assert errors[0].startswith("RuntimeError") and all(e == "" for e in errors[1:])
        summary = {row["cell"]: row for row in result.summary}
        assert summary["fig1a_baseline"]["n_seeds"] == 0

    def test_summarize_medians(self):
        rows = [
            {"suite": "s", "cell": "a", "seed": 0, "miou": 0.2},
            {"suite": "s", "cell": "a", "seed": 1, "miou": 0.4},
            {"suite": "s", "cell": "a", "seed": 2, "miou": 0.9},
        ]
        (summary,) = summarize_rows(rows)
        assert summary["median_miou"] == pytest.approx(0.4)
        assert summary["iqr_low"] == pytest.approx(0.3)
        assert summary["iqr_high"] == pytest.approx(0.65)
