"""Shared comparison head, combined loss, training step, and inference.

One parameter set serves both branches: the head scores each cell's
(prototype, feature) pair as background/foreground match. Training follows
the episodic pipeline: class-specific prototype -> fused grid -> logits;
optionally cluster the query background, pool class-agnostic prototypes,
fuse and score them; blend the two cross-entropies; one SGD-with-momentum
update per episode.

The class-agnostic branch is skipped entirely when its loss weight is zero
or the prototype budget is zero, which makes those runs bit-identical to a
baseline without the branch. Inference uses only the class-specific branch:
no clustering runs, so its cost is independent of the prototype budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as tf
from torch import nn

from .alignment import FusedTensor, assign_class_agnostic, expand_class_specific
from .backbone import Backbone, FeaturePack, extract_features, init_backbone
from .config import HeadConfig, RunConfig
from .data import Episode, upsample_mask
from .errors import CheckpointError, ContractError, DegenerateEpisodeError, NumericError, ShapeError
from .prototypes import (
    CLASS_AGNOSTIC,
    CLASS_SPECIFIC,
    PartitionMasks,
    Prototype,
    generate_class_agnostic_prototypes,
    kmeans_partition,
    masked_average_pool,
    remove_foreground,
    spp_partition,
)

CHECKPOINT_VERSION = 1


class ComparisonHead(nn.Module):
    """g: 3x3 conv -> tanh -> 1x1 conv with 2 output channels (bg, fg)."""

    def __init__(self, in_channels: int, cfg: HeadConfig):
        super().__init__()
        self.in_channels = in_channels
        self.conv3 = nn.Conv2d(in_channels, cfg.hidden_channels, kernel_size=3, padding=1).double()
        self.conv1 = nn.Conv2d(cfg.hidden_channels, 2, kernel_size=1).double()

    def forward(self, x_hwc: torch.Tensor) -> torch.Tensor:
        x = x_hwc.permute(2, 0, 1).unsqueeze(0)
        x = torch.tanh(self.conv3(x))
        x = self.conv1(x)
        return x.squeeze(0).permute(1, 2, 0)  # (h, w, 2)

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_head(in_channels: int, cfg: HeadConfig, seed: int) -> ComparisonHead:
    head = ComparisonHead(in_channels, cfg)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for conv in (head.conv3, head.conv1):
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=tuple(conv.weight.shape))
            conv.weight.copy_(torch.from_numpy(w))
            conv.bias.zero_()
    return head


def compare(fused: FusedTensor, head: ComparisonHead) -> torch.Tensor:
    """Per-cell 2-class logits for a fused (prototype, feature) grid."""
    if fused.X.shape[-1] != head.in_channels:
        raise ShapeError(f"fused channels {fused.X.shape[-1]} != head input {head.in_channels}")
    return head(fused.X)


def _cross_entropy(logits: torch.Tensor, target01: np.ndarray) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(target01, dtype=np.int64)).reshape(-1)
    return tf.cross_entropy(logits.reshape(-1, 2), t, reduction="mean")


def combined_loss(
    logits_sq: torch.Tensor,
    logits_qq: torch.Tensor | None,
    M_q: np.ndarray,
    lam: float,
) -> torch.Tensor:
    """(1-lam) * CE(sq branch, M_q) + lam * CE(qq branch, 1 - M_q).

    Each branch's cross-entropy is a mean over all cells, so the blend
    weights two same-scale quantities regardless of foreground area.
    """
    if not (0.0 <= lam <= 1.0):
        raise ContractError(f"lam={lam} outside [0, 1]")
    if not torch.isfinite(logits_sq).all():
        raise NumericError("non-finite class-specific logits")
    mask = np.asarray(M_q)
    ce_sq = _cross_entropy(logits_sq, mask)
    if lam == 0.0:
        return ce_sq
    if logits_qq is None:
        raise ContractError("lam > 0 requires class-agnostic logits")
    if not torch.isfinite(logits_qq).all():
        raise NumericError("non-finite class-agnostic logits")
    ce_qq = _cross_entropy(logits_qq, 1 - mask)
    return (1.0 - lam) * ce_sq + lam * ce_qq


# ---------------------------------------------------------------------------
# episodic forward pass


@dataclass
class ForwardOut:
    loss: torch.Tensor
    logits_sq: torch.Tensor
    logits_qq: torch.Tensor | None
    partition: PartitionMasks | None  # pre-removal partition (qq branch, query source)
    fg_index: int | None
    branch_active: bool


def _support_prototype(packs: list[FeaturePack]) -> Prototype:
    protos = [masked_average_pool(p.F, p.mask_feat) for p in packs]
    vec = torch.stack([p.vector for p in protos]).mean(dim=0)
    return Prototype(vector=vec, kind=CLASS_SPECIFIC, source_mask_area=sum(p.source_mask_area for p in protos))


def _prototype_budget(method) -> int:
    """Effective number of class-agnostic prototypes a config asks for.

    Zero disables the branch (the n=0 ablation cell is exactly the baseline).
    """
    if method.proto_source == "support":
        return min(method.num_prototypes, 1)
    if method.partition == "spp":
        return method.spp_bins**2
    return method.num_prototypes


def episode_forward(
    backbone: Backbone,
    head: ComparisonHead,
    episode: Episode,
    config: RunConfig,
    *,
    method_rng: np.random.Generator | None = None,
    partition: PartitionMasks | None = None,
    fg_index: int | None = None,
) -> ForwardOut:
    """Full two-branch forward pass for one episode.

    `partition` and `fg_index` replay a previously computed clustering and
    foreground negative draw (used by gradient checks and tests); otherwise
    they are computed here, consuming `method_rng`.
    """
    method = config.method
    packs_s = [extract_features(img, m, backbone) for img, m in episode.support]
    pack_q = extract_features(episode.query_image, episode.query_mask, backbone)
    mask_q = pack_q.mask_feat

    p_s = _support_prototype(packs_s)
    logits_sq = compare(expand_class_specific(p_s, pack_q.F), head)

    branch_active = method.lam > 0.0 and _prototype_budget(method) > 0
    if not branch_active:
        return ForwardOut(
            loss=combined_loss(logits_sq, None, mask_q, 0.0),
            logits_sq=logits_sq,
            logits_qq=None,
            partition=None,
            fg_index=None,
            branch_active=False,
        )

    rng_or_index: np.random.Generator | int
    if fg_index is not None:
        rng_or_index = fg_index
    elif method_rng is not None:
        rng_or_index = method_rng
    else:
        raise ContractError("active class-agnostic branch needs method_rng or fg_index")

    if method.proto_source == "support":
        bg_s = [(1 - p.mask_feat).astype(np.uint8) for p in packs_s]
        if all(m.sum() == 0 for m in bg_s):
            raise DegenerateEpisodeError("support is all-foreground at feature resolution")
        vecs = [
            masked_average_pool(p.F, m, kind=CLASS_AGNOSTIC)
            for p, m in zip(packs_s, bg_s)
            if m.sum() > 0
        ]
        p_bg = Prototype(
            vector=torch.stack([v.vector for v in vecs]).mean(dim=0),
            kind=CLASS_AGNOSTIC,
            source_mask_area=sum(v.source_mask_area for v in vecs),
        )
        query_bg = (1 - mask_q).astype(bool)
        if not query_bg.any():
            raise DegenerateEpisodeError("query is all-foreground at feature resolution")
        fused_qq = assign_class_agnostic([p_bg], [query_bg], mask_q, pack_q.F, rng_or_index)
        partition = None
    else:
        if partition is None:
            if method.partition == "spp":
                partition = spp_partition(*pack_q.F_bar.shape[:2], method.spp_bins)
            else:
                if method_rng is None:
                    raise ContractError("k-means partitioning needs method_rng")
                partition = kmeans_partition(pack_q.F_bar, method.num_prototypes, method.kmeans_iters, method_rng)
        bg = remove_foreground(partition, mask_q)
        protos_q = generate_class_agnostic_prototypes(pack_q.F, bg)
        fused_qq = assign_class_agnostic(protos_q, bg, mask_q, pack_q.F, rng_or_index)

    logits_qq = compare(fused_qq, head)
    loss = combined_loss(logits_sq, logits_qq, mask_q, method.lam)
    used_index = None
    if fused_qq.provenance is not None and np.asarray(mask_q, dtype=bool).any():
        used_index = int(fused_qq.provenance[np.asarray(mask_q, dtype=bool)][0])
    return ForwardOut(
        loss=loss,
        logits_sq=logits_sq,
        logits_qq=logits_qq,
        partition=partition,
        fg_index=used_index,
        branch_active=True,
    )


# ---------------------------------------------------------------------------
# train state and updates


@dataclass
class TrainState:
    backbone: Backbone
    head: ComparisonHead
    optimizer: torch.optim.SGD
    config: RunConfig
    fingerprint: str
    step: int = 0
    skips: int = 0
    data_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    method_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    last_loss: float | None = None

    def parameters(self) -> list[torch.nn.Parameter]:
        return list(self.backbone.parameters()) + list(self.head.parameters())

    def named_parameters(self) -> list[tuple[str, torch.nn.Parameter]]:
        return [(f"backbone.{n}", p) for n, p in self.backbone.named_parameters()] + [
            (f"head.{n}", p) for n, p in self.head.named_parameters()
        ]


def init_train_state(config: RunConfig) -> TrainState:
    config.validate()
    seeds = np.random.SeedSequence(config.train.seed).generate_state(4, np.uint64)
    backbone = init_backbone(config.backbone, int(seeds[0]))
    head = init_head(2 * config.backbone.feature_channels, config.head, int(seeds[1]))
    optimizer = torch.optim.SGD(
        list(backbone.parameters()) + list(head.parameters()),
        lr=config.train.lr,
        momentum=config.train.momentum,
    )
    return TrainState(
        backbone=backbone,
        head=head,
        optimizer=optimizer,
        config=config,
        fingerprint=config.fingerprint(),
        data_rng=np.random.default_rng(int(seeds[2])),
        method_rng=np.random.default_rng(int(seeds[3])),
    )


def train_episode(state: TrainState, episode: Episode, config: RunConfig | None = None) -> TrainState:
    """One episodic training step; degenerate episodes skip the update."""
    return train_batch(state, [episode], config)


def train_batch(state: TrainState, episodes: list[Episode], config: RunConfig | None = None) -> TrainState:
    """One update from the mean loss over a batch of episodes."""
    config = state.config if config is None else config
    losses: list[torch.Tensor] = []
    for episode in episodes:
        try:
            out = episode_forward(state.backbone, state.head, episode, config, method_rng=state.method_rng)
        except DegenerateEpisodeError:
            state.skips += 1
            continue
        losses.append(out.loss)
    if not losses:
        state.last_loss = None
        return state
    loss = losses[0] if len(losses) == 1 else torch.stack(losses).mean()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at step {state.step}")
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    state.last_loss = float(loss.detach())
    return state


def infer(
    support: list[tuple[np.ndarray, np.ndarray]],
    query_image: np.ndarray,
    state: TrainState,
) -> np.ndarray:
    """Class-specific branch only: k-averaged prototype, compare, argmax.

    No clustering and no class-agnostic computation happen here, so
    inference cost does not depend on the training-time prototype budget.
    """
    if len(support) < 1:
        raise ContractError("inference needs at least one support pair")
    with torch.no_grad():
        packs = [extract_features(img, m, state.backbone) for img, m in support]
        pack_q = extract_features(query_image, None, state.backbone)
        p = _support_prototype(packs)
        logits = compare(expand_class_specific(p, pack_q.F), state.head)
        pred_feat = logits.argmax(dim=-1).numpy().astype(np.uint8)
    return upsample_mask(pred_feat, *state.config.backbone.image_size)


# ---------------------------------------------------------------------------
# checkpoints: flat npz tensor container with a JSON meta header


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.named_parameters():
        arrays[f"param.{name}"] = p.detach().numpy()
        buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            arrays[f"momentum.{name}"] = buf.detach().numpy()
    meta = {
        "format": "protoseg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": state.step,
        "skips": state.skips,
        "fingerprint": state.fingerprint,
        "config": state.config.to_dict(),
        "data_rng_state": state.data_rng.bit_generator.state,
        "method_rng_state": state.method_rng.bit_generator.state,
    }
    np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path: str | Path, *, expected_fingerprint: str | None = None, force: bool = False) -> TrainState:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k].copy() for k in archive.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path} has no meta header")
    meta = json.loads(str(arrays.pop("__meta__")))
    if meta.get("format") != "protoseg-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version in {path}: {meta.get('version')}")
    if expected_fingerprint is not None and meta["fingerprint"] != expected_fingerprint and not force:
        raise CheckpointError(
            f"config fingerprint mismatch: checkpoint {meta['fingerprint']} vs expected {expected_fingerprint} "
            "(pass force=True / --force to override)"
        )
    config = RunConfig.from_dict(meta["config"])
    state = init_train_state(config)
    state.step = int(meta["step"])
    state.skips = int(meta["skips"])
    state.fingerprint = meta["fingerprint"]
    state.data_rng.bit_generator.state = meta["data_rng_state"]
    state.method_rng.bit_generator.state = meta["method_rng_state"]
    with torch.no_grad():
        for name, p in state.named_parameters():
            key = f"param.{name}"
            if key not in arrays:
                raise CheckpointError(f"missing tensor {key} in {path}")
            if arrays[key].shape != tuple(p.shape):
                raise CheckpointError(f"tensor {key} shape {arrays[key].shape} != model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arrays[key]))
            mkey = f"momentum.{name}"
            if mkey in arrays:
                state.optimizer.state[p] = {"momentum_buffer": torch.from_numpy(arrays[mkey].copy())}
    return state
