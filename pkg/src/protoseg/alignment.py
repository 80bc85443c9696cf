"""Fusion of prototypes with query features for the comparison head.

Two fusion modes, one per branch: the class-specific prototype is expanded
over the whole grid; class-agnostic prototypes are assigned region-wise on
the background while the foreground gets one randomly selected prototype as
its negative. Concatenation order is fixed (prototype channels first, then
feature channels) because the comparison head is shared across branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .errors import ContractError, ShapeError
from .prototypes import CLASS_SPECIFIC, PartitionMasks, Prototype

BRANCH_SQ = "sq"  # support prototype vs query features
BRANCH_QQ = "qq"  # query background prototypes vs query features


@dataclass
class FusedTensor:
    X: torch.Tensor  # (h, w, 2c)
    branch: str
    provenance: np.ndarray | None = None  # (h, w) prototype index map for qq


def expand_class_specific(p: Prototype, F_q: torch.Tensor) -> FusedTensor:
    """Tile the class-specific prototype over the grid and concat with F_q."""
    if p.kind != CLASS_SPECIFIC:
        raise ContractError(f"expected a class-specific prototype, got {p.kind}")
    h, w, c = F_q.shape
    if p.vector.shape != (c,):
        raise ShapeError(f"prototype dim {tuple(p.vector.shape)} != feature channels {c}")
    tiled = p.vector.view(1, 1, c).expand(h, w, c)
    return FusedTensor(X=torch.cat([tiled, F_q], dim=-1), branch=BRANCH_SQ)


def assign_class_agnostic(
    protos: Sequence[Prototype],
    bg_masks: PartitionMasks | Sequence[np.ndarray],
    M_q: np.ndarray,
    F_q: torch.Tensor,
    rng: np.random.Generator | int,
) -> FusedTensor:
    """Region-wise prototype assignment with a shared random foreground negative.

    Background cell in region k gets prototype k (positive pair); every
    foreground cell gets one prototype index r drawn uniformly once per call
    (negative pairs). `rng` may be a pre-drawn index for replay; when the
    foreground is empty at feature scale no index is drawn at all.
    """
    masks = list(bg_masks.masks if isinstance(bg_masks, PartitionMasks) else bg_masks)
    if len(protos) == 0 or len(protos) != len(masks):
        raise ContractError(f"need matching prototypes/masks, got {len(protos)}/{len(masks)}")
    h, w, c = F_q.shape
    for p in protos:
        if p.vector.shape != (c,):
            raise ShapeError(f"prototype dim {tuple(p.vector.shape)} != feature channels {c}")
    fg = np.asarray(M_q).astype(bool)
    if fg.shape != (h, w):
        raise ShapeError(f"mask shape {fg.shape} != feature grid {(h, w)}")

    index_map = np.full((h, w), -1, dtype=np.int64)
    for k, m in enumerate(masks):
        m = np.asarray(m).astype(bool)
        if m.shape != (h, w):
            raise ShapeError(f"bg mask shape {m.shape} != feature grid {(h, w)}")
        if (index_map[m] != -1).any() or (m & fg).any():
            raise ContractError("background masks must be disjoint and not touch the foreground")
        index_map[m] = k
    if fg.any():
        r = rng if isinstance(rng, (int, np.integer)) else int(rng.integers(len(protos)))
        if not (0 <= r < len(protos)):
            raise ContractError(f"foreground prototype index {r} out of range")
        index_map[fg] = r
    if (index_map == -1).any():
        raise ContractError("coverage violation: some cells in neither foreground nor any background mask")

    stacked = torch.stack([p.vector for p in protos])  # (n, c)
    assigned = stacked[torch.from_numpy(index_map)]  # (h, w, c)
    return FusedTensor(X=torch.cat([assigned, F_q], dim=-1), branch=BRANCH_QQ, provenance=index_map)
