"""Static figure/file emission: ablation curves, partition overlays,
qualitative prediction grids, and indexed partition-mask exports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .data import Episode
from .errors import ContractError
from .head import TrainState, infer
from .prototypes import PartitionMasks

# index 0 = foreground (excluded from partitions), 1..n = regions
_PALETTE = [
    (20, 20, 20),
    (230, 70, 60),
    (60, 140, 230),
    (70, 200, 110),
    (240, 200, 60),
    (180, 90, 220),
    (90, 220, 220),
    (240, 140, 50),
    (150, 150, 150),
]


def export_partition_indexed(
    partition: PartitionMasks | list[np.ndarray],
    M_q: np.ndarray | None,
    path: str | Path,
    scale: int = 8,
) -> Path:
    """Write the partition as an indexed PNG: pixel value = region index + 1,
    0 where the foreground mask is set. Exact by construction, so tests can
    histogram the file against the mask areas."""
    masks = partition.masks if isinstance(partition, PartitionMasks) else partition
    if len(masks) == 0:
        raise ContractError("empty partition")
    h, w = masks[0].shape
    index = np.zeros((h, w), dtype=np.uint8)
    for k, m in enumerate(masks):
        index[np.asarray(m, dtype=bool)] = k + 1
    if M_q is not None:
        index[np.asarray(M_q, dtype=bool)] = 0
    big_index = np.repeat(np.repeat(index, scale, axis=0), scale, axis=1)
    img = Image.fromarray(big_index, mode="P")
    palette = []
    for rgb in _PALETTE[: max(len(masks) + 1, 2)]:
        palette.extend(rgb)
    img.putpalette(palette)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)
    return path


def emit_ablation_plot(summary: list[dict], suite: str, path: str | Path) -> Path:
    """One figure per suite: line + IQR band for numeric grids, bars otherwise."""
    if not summary:
        raise ContractError("no summary rows to plot")
    cells = [row["cell"] for row in summary]
    med = [row["median_miou"] if row["median_miou"] != "" else np.nan for row in summary]
    lo = [row["iqr_low"] if row["iqr_low"] != "" else np.nan for row in summary]
    hi = [row["iqr_high"] if row["iqr_high"] != "" else np.nan for row in summary]
    fig, ax = plt.subplots(figsize=(6, 4))
    numeric = all("=" in c for c in cells)
    if numeric:
        try:
            xs = [float(c.split("=", 1)[1]) for c in cells]
        except ValueError:
            numeric = False
    if numeric:
        ax.plot(xs, med, marker="o")
        ax.fill_between(xs, lo, hi, alpha=0.25)
        ax.set_xlabel(cells[0].split("=", 1)[0])
    else:
        xs = np.arange(len(cells))
        ax.bar(xs, med, yerr=[np.subtract(med, lo), np.subtract(hi, med)], capsize=4)
        ax.set_xticks(xs)
        ax.set_xticklabels(cells, rotation=20, ha="right")
    ax.set_ylabel("novel-class mIoU (median, IQR over seeds)")
    ax.set_title(f"ablation: {suite}")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def emit_partition_overlays(
    state: TrainState,
    episode: Episode,
    out_dir: str | Path,
    *,
    num_prototypes: int = 3,
    spp_bins: int = 2,
    rng: np.random.Generator | None = None,
) -> list[Path]:
    """Side-by-side k-means vs SPP background partitions for one query image."""
    from .backbone import extract_features
    from .prototypes import kmeans_partition, remove_foreground, spp_partition

    rng = np.random.default_rng(0) if rng is None else rng
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pack = extract_features(episode.query_image, episode.query_mask, state.backbone)
    written = []
    km = remove_foreground(
        kmeans_partition(pack.F_bar, num_prototypes, state.config.method.kmeans_iters, rng), pack.mask_feat
    )
    sp = remove_foreground(spp_partition(*pack.F_bar.shape[:2], spp_bins), pack.mask_feat)
    written.append(export_partition_indexed(km, pack.mask_feat, out / "partition_kmeans.png"))
    written.append(export_partition_indexed(sp, pack.mask_feat, out / "partition_spp.png"))

    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    axes[0].imshow(episode.query_image)
    axes[0].set_title("query")
    for ax, part, name in ((axes[1], km, f"k-means (n={num_prototypes})"), (axes[2], sp, f"SPP ({spp_bins}x{spp_bins})")):
        index = np.zeros(part.masks.shape[1:], dtype=np.uint8)
        for k, m in enumerate(part.masks):
            index[m] = k + 1
        ax.imshow(index, cmap="tab10", interpolation="nearest", vmin=0, vmax=9)
        ax.set_title(name)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    comparison = out / "partition_comparison.png"
    fig.savefig(comparison, dpi=130)
    plt.close(fig)
    written.append(comparison)
    return written


def emit_qualitative_grid(
    states: dict[str, TrainState],
    episodes: list[Episode],
    path: str | Path,
) -> Path:
    """Rows: support, query+gt, one prediction row per named model."""
    if not episodes or not states:
        raise ContractError("need at least one episode and one model")
    n = len(episodes)
    rows = 2 + len(states)
    fig, axes = plt.subplots(rows, n, figsize=(2.2 * n, 2.2 * rows), squeeze=False)
    for j, ep in enumerate(episodes):
        img, mask = ep.support[0]
        axes[0][j].imshow(_overlay(img, mask))
        axes[0][j].set_title(f"class {ep.class_id}", fontsize=9)
        axes[1][j].imshow(_overlay(ep.query_image, ep.query_mask))
        for i, (name, state) in enumerate(states.items()):
            pred = infer(list(ep.support), ep.query_image, state)
            axes[2 + i][j].imshow(_overlay(ep.query_image, pred))
    row_names = ["support", "query (gt)"] + list(states)
    for i, name in enumerate(row_names):
        axes[i][0].set_ylabel(name, fontsize=9)
    for ax_row in axes:
        for ax in ax_row:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def emit_plots(reports: list[dict], out_dir: str | Path) -> list[Path]:
    """Render ablation curves for a list of summary records (grouped by suite)."""
    if not reports:
        raise ContractError("no reports to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_suite: dict[str, list[dict]] = {}
    for row in reports:
        by_suite.setdefault(row["suite"], []).append(row)
    return [emit_ablation_plot(rows, suite, out / f"ablation_{suite}.png") for suite, rows in by_suite.items()]


def _overlay(image: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    out = image.copy()
    m = np.asarray(mask, dtype=bool)
    tint = np.array([1.0, 0.9, 0.1])
    out[m] = (1 - alpha) * out[m] + alpha * tint
    return out
