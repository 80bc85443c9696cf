#!/usr/bin/env python3
"""Render a handful of benchmark episodes and partition visualizations so the
synthetic data can be eyeballed: biased training scenes (with the hidden
novel-class objects), test episodes, and k-means vs SPP background masks."""

import argparse
from pathlib import Path

import numpy as np
import torch

from protoseg.data import dump_episode, make_class_split, render_scene, sample_episode
from protoseg.experiments import benchmark_config, scene_params_from
from protoseg.head import init_train_state
from protoseg.plots import emit_partition_overlays


def main() -> None:
    torch.set_num_threads(1)
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("runs/preview"))
    ap.add_argument("--episodes", type=int, default=4)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = benchmark_config()
    split = make_class_split(cfg.data.num_classes, cfg.data.fold, cfg.data.num_folds)
    params = scene_params_from(cfg)
    rng = np.random.default_rng(args.seed)
    state = init_train_state(cfg)

    for phase, bias in (("train", cfg.data.bias_rate), ("test", 0.0)):
        for i in range(args.episodes):
            ep = sample_episode(split, phase, 1, bias, rng, params=params, feature_hw=cfg.feature_hw)
            out = args.out / f"{phase}_episode_{i}_class{ep.class_id}"
            dump_episode(ep, out)
            _, per_class = render_scene(ep.query_spec)
            hidden = sorted(set(per_class) & set(split.novel_ids))
            if hidden:
                (out / "hidden_novel_classes.txt").write_text(f"{hidden}\n")
    ep = sample_episode(split, "train", 1, 1.0, rng, params=params, feature_hw=cfg.feature_hw)
    emit_partition_overlays(state, ep, args.out / "partitions")
    print(f"wrote previews under {args.out}")


if __name__ == "__main__":
    main()
