"""Prototype generation: masked average pooling, cosine k-means background
partitioning, foreground removal, and the SPP comparator partitioner.

Masked average pooling is the single pooling primitive used by both
branches: class-specific prototypes pool support foreground, class-agnostic
prototypes pool query background clusters. Pooling is differentiable in the
features; partition masks are constants with respect to the loss (they come
from gradient-stopped features via hard assignments).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import (
    ConfigError,
    ContractError,
    DegenerateEpisodeError,
    EmptyMaskError,
    ShapeError,
)

CLASS_SPECIFIC = "class_specific"
CLASS_AGNOSTIC = "class_agnostic"


@dataclass
class Prototype:
    vector: torch.Tensor  # (c,)
    kind: str
    source_mask_area: int

    def __post_init__(self) -> None:
        if self.kind not in (CLASS_SPECIFIC, CLASS_AGNOSTIC):
            raise ContractError(f"unknown prototype kind {self.kind!r}")
        if self.source_mask_area < 1:
            raise ContractError("source_mask_area must be >= 1")


@dataclass
class PartitionMasks:
    """n disjoint binary masks over the feature grid.

    Fresh partitions (k-means or SPP) cover the whole grid; after
    `remove_foreground` they cover exactly the background.
    """

    masks: np.ndarray  # (n, h, w) bool
    origin: str  # "kmeans" | "spp"

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise ShapeError(f"masks must be (n, h, w), got {self.masks.shape}")
        if self.masks.astype(np.int64).sum(axis=0).max(initial=0) > 1:
            raise ContractError("partition masks overlap")

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    def __len__(self) -> int:
        return self.n

    def __iter__(self):
        return iter(self.masks)

    def covers_grid(self) -> bool:
        return self.n > 0 and bool(self.masks.any(axis=0).all())


def masked_average_pool(F: torch.Tensor, M: np.ndarray, kind: str = CLASS_SPECIFIC) -> Prototype:
    """Average the feature vectors under a binary mask (the MAP primitive).

    Gradients flow into `F` at masked positions only; the mask is a constant.
    """
    if F.ndim != 3:
        raise ShapeError(f"features must be (h, w, c), got {tuple(F.shape)}")
    mask = np.asarray(M)
    if mask.shape != tuple(F.shape[:2]):
        raise ShapeError(f"mask shape {mask.shape} != feature grid {tuple(F.shape[:2])}")
    area = int(mask.sum())
    if area == 0:
        raise EmptyMaskError("masked_average_pool over an all-zero mask")
    m = torch.from_numpy(mask.astype(np.float64))
    vector = (F * m.unsqueeze(-1)).sum(dim=(0, 1)) / float(area)
    return Prototype(vector=vector, kind=kind, source_mask_area=area)


# ---------------------------------------------------------------------------
# cosine k-means


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    out = np.zeros_like(x)
    nz = norms[:, 0] > 0
    out[nz] = x[nz] / norms[nz]
    return out


def cosine_kmeans(
    X: np.ndarray, n: int, iters: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Hard-assignment k-means under distance 1 - cos(x, u).

    Farthest-point seeding (first seed from `rng`), argmin ties broken by
    lowest cluster index, empty clusters re-seeded from the worst-fit point.
    Returns (labels, per-iteration objective values). The objective is
    non-increasing across iterations: the centroid update uses the mean of
    the unit-normalized members, which is the exact minimizer of the cosine
    objective for fixed assignments.
    """
    N = X.shape[0]
    if n < 1 or iters < 1:
        raise ConfigError("n and iters must be >= 1")
    if n > N:
        raise ConfigError(f"n={n} exceeds number of feature vectors {N}")
    units = _unit_rows(np.asarray(X, dtype=np.float64))
    nonzero = np.flatnonzero(np.linalg.norm(units, axis=1) > 0)
    if nonzero.size == 0:
        raise ContractError("all feature vectors have zero norm")

    # farthest-point seeding; zero-norm cells are never picked as seeds
    centroids = np.empty((n, X.shape[1]), dtype=np.float64)
    first = int(nonzero[int(rng.integers(nonzero.size))])
    centroids[0] = units[first]
    seedable = np.full(N, -np.inf)
    seedable[nonzero] = 0.0
    if n > 1:
        dmin = 1.0 - units @ centroids[0]
        for k in range(1, n):
            centroids[k] = units[int(np.argmax(dmin + seedable))]
            dmin = np.minimum(dmin, 1.0 - units @ centroids[k])

    labels = np.zeros(N, dtype=np.int64)
    objective = np.empty(iters, dtype=np.float64)
    for t in range(iters):
        dists = 1.0 - units @ _unit_rows(centroids).T  # (N, n)
        labels = np.argmin(dists, axis=1)
        assigned = dists[np.arange(N), labels]
        objective[t] = float(assigned.sum())
        counts = np.bincount(labels, minlength=n)
        for k in np.flatnonzero(counts == 0):
            centroids[k] = units[int(np.argmax(assigned))]
        for k in np.flatnonzero(counts > 0):
            centroids[k] = units[labels == k].mean(axis=0)
    return labels, objective


def kmeans_partition(
    F_bar: torch.Tensor | np.ndarray, n: int, iters: int, rng: np.random.Generator
) -> PartitionMasks:
    """Partition the feature grid by cosine k-means on high-level features.

    Clusters empty at termination are dropped, so the returned partition may
    have fewer than `n` masks; it always covers the grid.
    """
    grid = F_bar.detach().numpy() if isinstance(F_bar, torch.Tensor) else np.asarray(F_bar)
    if grid.ndim != 3:
        raise ShapeError(f"features must be (h, w, c), got {grid.shape}")
    h, w, _ = grid.shape
    if n > h * w:
        raise ConfigError(f"n={n} exceeds grid size {h * w}")
    labels, _ = cosine_kmeans(grid.reshape(h * w, -1), n, iters, rng)
    grid_labels = labels.reshape(h, w)
    masks = [grid_labels == k for k in range(n) if (grid_labels == k).any()]
    return PartitionMasks(masks=np.stack(masks), origin="kmeans")


# ---------------------------------------------------------------------------
# foreground removal and pooling over partitions


def remove_foreground(partition: PartitionMasks, M_q: np.ndarray) -> PartitionMasks:
    """Subtract the annotated foreground from every mask; drop emptied masks.

    The input partition must cover the grid; the output masks union to
    exactly the complement of `M_q`.
    """
    fg = np.asarray(M_q).astype(bool)
    if fg.shape != partition.masks.shape[1:]:
        raise ShapeError(f"mask shape {fg.shape} != partition grid {partition.masks.shape[1:]}")
    if not partition.covers_grid():
        raise ContractError("remove_foreground expects a grid-covering partition")
    kept = [m & ~fg for m in partition.masks if (m & ~fg).any()]
    if not kept:
        raise DegenerateEpisodeError("query is all-foreground at feature resolution")
    return PartitionMasks(masks=np.stack(kept), origin=partition.origin)


def generate_class_agnostic_prototypes(
    F_q: torch.Tensor, bg_masks: PartitionMasks | Sequence[np.ndarray]
) -> list[Prototype]:
    """One class-agnostic prototype per background mask, order preserved."""
    masks = bg_masks.masks if isinstance(bg_masks, PartitionMasks) else bg_masks
    return [masked_average_pool(F_q, m, kind=CLASS_AGNOSTIC) for m in masks]


# ---------------------------------------------------------------------------
# SPP comparator


def spp_partition(h: int, w: int, a: int) -> PartitionMasks:
    """a x a rectangular bins tiling the grid, edges at floor(i*h/a)."""
    if not (1 <= a <= min(h, w)):
        raise ConfigError(f"spp bins a={a} out of range [1, {min(h, w)}]")
    row_edges = [(i * h) // a for i in range(a + 1)]
    col_edges = [(j * w) // a for j in range(a + 1)]
    masks = np.zeros((a * a, h, w), dtype=bool)
    for bi in range(a):
        for bj in range(a):
            masks[bi * a + bj, row_edges[bi] : row_edges[bi + 1], col_edges[bj] : col_edges[bj + 1]] = True
    return PartitionMasks(masks=masks, origin="spp")
