"""Run drivers: training loops, evaluation, and the four ablation suites.

These bind the data sampler, the episodic trainer, and the metrics engine
into reproducible runs: a run is a pure function of its RunConfig, and
ablation tables are byte-identical across repeats of the same config.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import MethodConfig, RunConfig
from .data import SceneParams, make_class_split, sample_episode
from .errors import ConfigError, NumericError
from .head import TrainState, infer, init_train_state, load_checkpoint, save_checkpoint, train_batch
from .metrics import ConfusionCounts, MetricsReport, accumulate, fbiou, miou, per_class_iou

ABLATION_SUITES = ("n_sweep", "lambda_sweep", "partition", "proto_source")

N_GRID = (0, 1, 2, 3, 4, 5)
LAMBDA_GRID = (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0)
SPP_GRID = (2, 3, 4, 5)

_EVAL_STREAM = 0xE7A1


def benchmark_config(out_dir: str = "runs/benchmark", **overrides) -> RunConfig:
    """The calibrated synthetic benchmark used by the trend studies.

    Sixteen classes over four folds, biased training scenes (75% carry a
    hidden novel-class object that shares the target's hue), a finite pool
    of training episodes, and a training budget long enough for the
    background-memorization bias to entrench in the baseline.
    """
    from .config import make_run_config

    defaults = dict(
        data_num_classes=16,
        data_bias_rate=0.75,
        train_steps=6000,
        train_lr=0.02,
        train_train_pool=400,
        train_eval_episodes=200,
        out_dir=out_dir,
    )
    defaults.update(overrides)
    return make_run_config(32, **defaults)


def scene_params_from(config: RunConfig) -> SceneParams:
    d = config.data
    return SceneParams(
        image_size=tuple(d.image_size),
        radius_frac=tuple(d.radius_frac),
        distractor_prob=d.distractor_prob,
        max_distractors=d.max_distractors,
        min_visible_frac=d.min_visible_frac,
        gain_range=tuple(d.gain_range),
        confusable_prob=d.confusable_prob,
        bg_two_region_prob=d.bg_two_region_prob,
        plant_radius_frac=None if d.plant_radius_frac is None else tuple(d.plant_radius_frac),
    )


_POOL_STREAM = 0x9001


def next_train_episode(config: RunConfig, split, params: SceneParams, data_rng: np.random.Generator):
    """One training episode, either fresh or drawn from the finite pool.

    A finite pool reuses episode templates: template i is a pure function of
    (seed, i), so revisits are bit-identical, the way a finite dataset
    revisits its images across epochs.
    """
    t = config.train
    if t.train_pool > 0:
        idx = int(data_rng.integers(t.train_pool))
        rng = np.random.default_rng(np.random.SeedSequence([t.seed, _POOL_STREAM, idx]))
    else:
        rng = data_rng
    return sample_episode(
        split,
        "train",
        t.k_shot_train,
        config.data.bias_rate,
        rng,
        params=params,
        feature_hw=config.feature_hw,
    )


def run_train(config: RunConfig, *, quiet: bool = True) -> tuple[Path, Path]:
    """Train on the base classes of the configured fold.

    Returns (checkpoint path, log path). The log is JSONL with one record
    per sampling step: step, loss, skips, wall_time_s. On a non-finite loss
    the run aborts, keeping the last periodic checkpoint on disk.
    """
    config = config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    ckpt_path = out / "checkpoint.npz"
    log_path = out / "train_log.jsonl"

    state = init_train_state(config)
    split = make_class_split(config.data.num_classes, config.data.fold, config.data.num_folds)
    params = scene_params_from(config)
    t = config.train
    with log_path.open("w") as log:
        for i in range(t.steps):
            t0 = time.perf_counter()
            episodes = [next_train_episode(config, split, params, state.data_rng) for _ in range(t.batch_episodes)]
            try:
                train_batch(state, episodes, config)
            except NumericError:
                log.write(json.dumps({"step": i, "aborted": "non-finite loss"}) + "\n")
                raise
            log.write(
                json.dumps(
                    {
                        "step": i,
                        "loss": state.last_loss,
                        "skips": state.skips,
                        "wall_time_s": time.perf_counter() - t0,
                    }
                )
                + "\n"
            )
            if t.checkpoint_every > 0 and (i + 1) % t.checkpoint_every == 0:
                save_checkpoint(state, ckpt_path)
            if not quiet and (i + 1) % max(1, t.steps // 10) == 0:
                print(f"[train] step {i + 1}/{t.steps} loss={state.last_loss} skips={state.skips}", flush=True)
    save_checkpoint(state, ckpt_path)
    return ckpt_path, log_path


def evaluate_state(
    state: TrainState,
    config: RunConfig,
    *,
    eval_seed: int | None = None,
    n_episodes: int | None = None,
    k_shot: int | None = None,
) -> MetricsReport:
    """Sample test episodes from the novel classes (round-robin) and score."""
    split = make_class_split(config.data.num_classes, config.data.fold, config.data.num_folds)
    params = scene_params_from(config)
    feature_hw = config.feature_hw
    k = config.train.k_shot_eval if k_shot is None else k_shot
    n = config.train.eval_episodes if n_episodes is None else n_episodes
    if n < len(split.novel_ids):
        raise ConfigError(f"need at least {len(split.novel_ids)} eval episodes to cover every novel class")
    seed_entropy = config.train.seed if eval_seed is None else eval_seed
    rng = np.random.default_rng(np.random.SeedSequence([seed_entropy, _EVAL_STREAM]))
    counts = ConfusionCounts()
    preds, gts = [], []
    for i in range(n):
        class_id = split.novel_ids[i % len(split.novel_ids)]
        ep = sample_episode(
            split, "test", k, config.data.bias_rate, rng, params=params, feature_hw=feature_hw, class_id=class_id
        )
        pred = infer(list(ep.support), ep.query_image, state)
        accumulate(counts, pred, ep.query_mask, class_id)
        preds.append(pred)
        gts.append(ep.query_mask)
    return MetricsReport(
        per_class=per_class_iou(counts),
        miou=miou(counts, split.novel_ids),
        fbiou=fbiou(preds, gts),
        fold=config.data.fold,
        n_episodes=n,
        fingerprint=config.fingerprint(),
    )


def run_eval(
    checkpoint: str | Path,
    config: RunConfig,
    *,
    force: bool = False,
    eval_seed: int | None = None,
    write: bool = True,
) -> MetricsReport:
    """Evaluate a checkpoint; refuses on config fingerprint mismatch unless forced."""
    config = config.validate()
    state = load_checkpoint(checkpoint, expected_fingerprint=config.fingerprint(), force=force)
    report = evaluate_state(state, config, eval_seed=eval_seed)
    if write:
        report.save(Path(config.out_dir) / f"metrics.{config.data.fold}.json")
        report.save_class_table(Path(config.out_dir) / f"per_class.{config.data.fold}.csv")
    return report


# ---------------------------------------------------------------------------
# ablation suites


@dataclass
class AblationResult:
    suite: str
    rows: list[dict]
    summary: list[dict]
    table_path: Path
    summary_path: Path
    plot_path: Path


def ablation_cells(suite: str, base: MethodConfig) -> list[tuple[str, MethodConfig]]:
    """The paper-grid cells for one ablation suite."""
    rep = dataclasses.replace
    if suite == "n_sweep":
        return [(f"n={n}", rep(base, num_prototypes=n, partition="kmeans", proto_source="query")) for n in N_GRID]
    if suite == "lambda_sweep":
        return [
            (f"lam={lam}", rep(base, lam=lam, num_prototypes=3, partition="kmeans", proto_source="query"))
            for lam in LAMBDA_GRID
        ]
    if suite == "partition":
        cells = [
            ("baseline", rep(base, lam=0.0)),
            ("kmeans_n3", rep(base, partition="kmeans", num_prototypes=3, proto_source="query")),
        ]
        cells += [(f"spp_a{a}", rep(base, partition="spp", spp_bins=a, proto_source="query")) for a in SPP_GRID]
        return cells
    if suite == "proto_source":
        return [
            ("fig1a_baseline", rep(base, lam=0.0)),
            ("fig1b_support1", rep(base, proto_source="support", num_prototypes=1)),
            ("fig1c_query1", rep(base, proto_source="query", partition="kmeans", num_prototypes=1)),
            ("fig1d_full", rep(base, proto_source="query", partition="kmeans", num_prototypes=3)),
        ]
    raise ConfigError(f"unknown ablation suite {suite!r}; choose from {ABLATION_SUITES}")


def run_ablation(
    suite: str,
    base_config: RunConfig,
    *,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    out_dir: str | Path | None = None,
    quiet: bool = True,
) -> AblationResult:
    """Run one suite over its grid x seeds; emits table.csv, summary.csv, plot.

    Per-cell failures are recorded in the table (error column) and the suite
    keeps going.
    """
    if len(seeds) < 1:
        raise ConfigError("need at least one seed")
    base_config = base_config.validate()
    out = Path(out_dir) if out_dir is not None else Path(base_config.out_dir) / f"ablation_{suite}"
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    for cell_name, method in ablation_cells(suite, base_config.method):
        for seed in seeds:
            cfg = dataclasses.replace(
                base_config,
                method=method,
                train=dataclasses.replace(base_config.train, seed=seed),
                out_dir=str(out / "cells" / cell_name / f"seed{seed}"),
            )
            row = {"suite": suite, "cell": cell_name, "seed": seed}
            try:
                ckpt, _ = run_train(cfg)
                report = run_eval(ckpt, cfg)
                row.update(
                    miou=report.miou,
                    fbiou=report.fbiou,
                    n_episodes=report.n_episodes,
                    error="",
                )
            except Exception as exc:  # record and continue: the suite must complete
                row.update(miou="", fbiou="", n_episodes="", error=f"{type(exc).__name__}: {exc}")
            rows.append(row)
            if not quiet:
                print(f"[ablate:{suite}] {cell_name} seed={seed} -> {row.get('miou', '')}", flush=True)

    summary = summarize_rows(rows)
    table_path = _write_csv(out / "table.csv", rows, ["suite", "cell", "seed", "miou", "fbiou", "n_episodes", "error"])
    summary_path = _write_csv(
        out / "summary.csv", summary, ["suite", "cell", "median_miou", "iqr_low", "iqr_high", "n_seeds"]
    )
    from .plots import emit_ablation_plot

    plot_path = emit_ablation_plot(summary, suite, out / f"ablation_{suite}.png")
    return AblationResult(
        suite=suite, rows=rows, summary=summary, table_path=table_path, summary_path=summary_path, plot_path=plot_path
    )


def summarize_rows(rows: list[dict]) -> list[dict]:
    """Median with interquartile range per cell, failures excluded."""
    by_cell: dict[tuple[str, str], list[float]] = {}
    order: list[tuple[str, str]] = []
    for row in rows:
        key = (row["suite"], row["cell"])
        if key not in by_cell:
            by_cell[key] = []
            order.append(key)
        if row.get("miou") not in ("", None):
            by_cell[key].append(float(row["miou"]))
    summary = []
    for suite, cell in order:
        vals = by_cell[(suite, cell)]
        if vals:
            summary.append(
                {
                    "suite": suite,
                    "cell": cell,
                    "median_miou": float(np.median(vals)),
                    "iqr_low": float(np.percentile(vals, 25)),
                    "iqr_high": float(np.percentile(vals, 75)),
                    "n_seeds": len(vals),
                }
            )
        else:
            summary.append(
                {"suite": suite, "cell": cell, "median_miou": "", "iqr_low": "", "iqr_high": "", "n_seeds": 0}
            )
    return summary


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> Path:
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})
    return path
