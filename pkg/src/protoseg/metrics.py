"""Per-class IoU, mIoU over novel classes, and FB-IoU.

IoU is computed from TP/FP/FN counts pooled over all evaluated query images
of a class (not a mean of per-episode IoUs). Counts form a commutative
monoid, so per-worker accumulation plus merge gives order-independent
results. FB-IoU pools every episode into a single foreground-vs-background
pair of counts and averages the two IoUs; it is biased toward the
background class on small-object imagery, which is exactly why mIoU is the
headline number.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError


@dataclass
class ConfusionCounts:
    # class id -> [tp, fp, fn]
    counts: dict[int, np.ndarray] = field(default_factory=dict)

    def merge(self, other: "ConfusionCounts") -> "ConfusionCounts":
        out = ConfusionCounts()
        for src in (self, other):
            for cid, c in src.counts.items():
                out.counts[cid] = out.counts.get(cid, np.zeros(3, dtype=np.int64)) + c
        return out


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    if not np.isin(pred, (0, 1)).all() or not np.isin(gt, (0, 1)).all():
        raise ContractError("masks must be binary")
    return pred.astype(bool), gt.astype(bool)


def accumulate(counts: ConfusionCounts, pred: np.ndarray, gt: np.ndarray, class_id: int) -> ConfusionCounts:
    """Add one query's TP/FP/FN to the class tallies; returns `counts`."""
    p, g = _check_pair(pred, gt)
    c = counts.counts.setdefault(class_id, np.zeros(3, dtype=np.int64))
    c += np.array([int((p & g).sum()), int((p & ~g).sum()), int((~p & g).sum())], dtype=np.int64)
    return counts


def iou_from_counts(c: np.ndarray) -> float:
    tp, fp, fn = (int(v) for v in c)
    denom = tp + fp + fn
    if denom == 0:
        raise ContractError("IoU undefined for a class with no observations")
    return tp / denom


def per_class_iou(counts: ConfusionCounts) -> dict[int, float]:
    return {cid: iou_from_counts(c) for cid, c in sorted(counts.counts.items())}


def miou(counts: ConfusionCounts, novel_ids: Iterable[int]) -> float:
    """Unweighted mean of per-class IoU over the novel classes."""
    vals = []
    for cid in novel_ids:
        c = counts.counts.get(cid)
        if c is None or int(c.sum()) == 0:
            raise ContractError(f"class {cid} was never evaluated")
        vals.append(iou_from_counts(c))
    if not vals:
        raise ContractError("no novel classes to average")
    return float(np.mean(vals))


def fbiou(all_preds: Sequence[np.ndarray], all_gts: Sequence[np.ndarray]) -> float:
    """Pool every episode as one foreground class; mean of fg and bg IoU."""
    if len(all_preds) == 0 or len(all_preds) != len(all_gts):
        raise ContractError("need equally many predictions and ground truths")
    fg = np.zeros(3, dtype=np.int64)
    bg = np.zeros(3, dtype=np.int64)
    for pred, gt in zip(all_preds, all_gts):
        p, g = _check_pair(pred, gt)
        fg += np.array([(p & g).sum(), (p & ~g).sum(), (~p & g).sum()], dtype=np.int64)
        bg += np.array([(~p & ~g).sum(), (~p & g).sum(), (p & ~g).sum()], dtype=np.int64)
    return (iou_from_counts(fg) + iou_from_counts(bg)) / 2.0


@dataclass
class MetricsReport:
    per_class: dict[int, float]
    miou: float
    fbiou: float
    fold: int
    n_episodes: int
    fingerprint: str

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "miou": self.miou,
            "fbiou": self.fbiou,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class.items())},
            "n_episodes": self.n_episodes,
            "fingerprint": self.fingerprint,
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    def save_class_table(self, path: str | Path) -> Path:
        """Flat per-class table (class_id, iou), one row per novel class."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["class_id,iou"] + [f"{cid},{iou}" for cid, iou in sorted(self.per_class.items())]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            per_class={int(k): float(v) for k, v in d["per_class_iou"].items()},
            miou=float(d["miou"]),
            fbiou=float(d["fbiou"]),
            fold=int(d["fold"]),
            n_episodes=int(d["n_episodes"]),
            fingerprint=str(d["fingerprint"]),
        )
