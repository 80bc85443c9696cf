"""Command-line driver: train / eval / ablate / plot.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import PARTITION_KINDS, PROTO_SOURCES, RunConfig, make_run_config
from .errors import CheckpointError, ConfigError, ProtoSegError


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(_fail(f"usage error: {message}"))


def _fail(message: str, code: int = 1) -> int:
    print(f"protoseg: {message}", file=sys.stderr)
    return code


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, help="JSON run config; flags override its fields")
    # data
    p.add_argument("--num-classes", type=int, dest="data_num_classes")
    p.add_argument("--num-folds", type=int, dest="data_num_folds")
    p.add_argument("--fold", type=int, dest="data_fold")
    p.add_argument("--image-size", type=int, dest="image_size", help="square image side in pixels")
    p.add_argument("--bias-rate", type=float, dest="data_bias_rate")
    # method
    p.add_argument("--lam", type=float, dest="method_lam")
    p.add_argument("--num-prototypes", type=int, dest="method_num_prototypes")
    p.add_argument("--kmeans-iters", type=int, dest="method_kmeans_iters")
    p.add_argument("--partition", choices=PARTITION_KINDS, dest="method_partition")
    p.add_argument("--spp-bins", type=int, dest="method_spp_bins")
    p.add_argument("--proto-source", choices=PROTO_SOURCES, dest="method_proto_source")
    # training
    p.add_argument("--seed", type=int, dest="train_seed")
    p.add_argument("--steps", type=int, dest="train_steps")
    p.add_argument("--lr", type=float, dest="train_lr")
    p.add_argument("--momentum", type=float, dest="train_momentum")
    p.add_argument("--k-shot-train", type=int, dest="train_k_shot_train")
    p.add_argument("--k-shot-eval", type=int, dest="train_k_shot_eval")
    p.add_argument("--eval-episodes", type=int, dest="train_eval_episodes")
    p.add_argument("--checkpoint-every", type=int, dest="train_checkpoint_every")
    p.add_argument("--out", type=str, dest="out_dir")


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: val
        for key, val in vars(args).items()
        if val is not None and (key.partition("_")[0] in ("data", "method", "train", "head") or key == "out_dir")
    }
    if args.config:
        cfg = RunConfig.load(args.config)
        d = cfg.to_dict()
        for key, val in overrides.items():
            if key == "out_dir":
                d["out_dir"] = val
            else:
                section, _, name = key.partition("_")
                d[section][name] = val
        if getattr(args, "image_size", None) is not None:
            d["data"]["image_size"] = [args.image_size, args.image_size]
            d["backbone"]["image_size"] = [args.image_size, args.image_size]
        return RunConfig.from_dict(d)
    image_size = args.image_size if getattr(args, "image_size", None) is not None else 32
    return make_run_config(image_size=image_size, **overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protoseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_train = sub.add_parser("train", help="train one run")
    _add_config_flags(p_train)
    p_train.add_argument("--verbose", action="store_true")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the novel fold")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--force", action="store_true", help="ignore config fingerprint mismatch")
    p_eval.add_argument("--eval-seed", type=int, default=None)

    p_abl = sub.add_parser("ablate", help="run one ablation suite")
    _add_config_flags(p_abl)
    p_abl.add_argument("--suite", required=True, choices=("n_sweep", "lambda_sweep", "partition", "proto_source"))
    p_abl.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p_abl.add_argument("--verbose", action="store_true")

    p_plot = sub.add_parser("plot", help="render plots from ablation summaries and/or a checkpoint")
    _add_config_flags(p_plot)
    p_plot.add_argument("--summary", type=str, nargs="*", default=[], help="summary.csv files to plot")
    p_plot.add_argument("--checkpoint", type=str, help="emit partition overlays + qualitative grid for this model")
    p_plot.add_argument("--episodes", type=int, default=4)
    p_plot.add_argument("--dump-episodes", action="store_true", help="also dump raw episode PNGs")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    torch.set_num_threads(1)  # keeps runs bit-reproducible on any host
    try:
        return _dispatch(args)
    except (ConfigError, CheckpointError) as exc:
        return _fail(str(exc), 1)
    except ProtoSegError as exc:
        return _fail(str(exc), 2)
    except Exception as exc:  # runtime failure
        return _fail(f"{type(exc).__name__}: {exc}", 2)


def _dispatch(args: argparse.Namespace) -> int:
    from . import experiments

    if args.command == "train":
        cfg = _config_from_args(args)
        ckpt, log = experiments.run_train(cfg, quiet=not args.verbose)
        print(f"checkpoint: {ckpt}")
        print(f"log: {log}")
        return 0

    if args.command == "eval":
        cfg = _config_from_args(args)
        report = experiments.run_eval(args.checkpoint, cfg, force=args.force, eval_seed=args.eval_seed)
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
        return 0

    if args.command == "ablate":
        cfg = _config_from_args(args)
        result = experiments.run_ablation(args.suite, cfg, seeds=tuple(args.seeds), quiet=not args.verbose)
        print(f"table: {result.table_path}")
        print(f"summary: {result.summary_path}")
        print(f"plot: {result.plot_path}")
        return 0

    if args.command == "plot":
        return _plot(args)

    raise ConfigError(f"unknown command {args.command!r}")


def _plot(args: argparse.Namespace) -> int:
    from . import plots
    from .data import dump_episode, make_class_split, sample_episode
    from .experiments import scene_params_from
    from .head import load_checkpoint

    emitted: list[Path] = []
    cfg = _config_from_args(args)
    out = Path(cfg.out_dir)
    summary_rows: list[dict] = []
    for path in args.summary:
        with open(path, newline="") as f:
            summary_rows.extend(list(csv.DictReader(f)))
    if summary_rows:
        for row in summary_rows:
            for key in ("median_miou", "iqr_low", "iqr_high"):
                if row.get(key):
                    row[key] = float(row[key])
        emitted += plots.emit_plots(summary_rows, out)

    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, expected_fingerprint=cfg.fingerprint(), force=True)
        run_cfg = state.config
        split = make_class_split(run_cfg.data.num_classes, run_cfg.data.fold, run_cfg.data.num_folds)
        rng = np.random.default_rng(run_cfg.train.seed + 1)
        episodes = [
            sample_episode(
                split,
                "test",
                run_cfg.train.k_shot_eval,
                run_cfg.data.bias_rate,
                rng,
                params=scene_params_from(run_cfg),
                feature_hw=run_cfg.feature_hw,
            )
            for _ in range(args.episodes)
        ]
        emitted += plots.emit_partition_overlays(state, episodes[0], out)
        emitted.append(plots.emit_qualitative_grid({"model": state}, episodes, out / "qualitative.png"))
        if args.dump_episodes:
            for i, ep in enumerate(episodes):
                emitted += dump_episode(ep, out / f"episode_{i}")

    if not emitted:
        raise ConfigError("nothing to plot: pass --summary files and/or --checkpoint")
    for path in emitted:
        print(f"wrote: {path}")
    return 0


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
