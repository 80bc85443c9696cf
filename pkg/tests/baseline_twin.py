"""A from-scratch baseline trainer with the class-agnostic modules removed.

This is the comparison build for the exact-equivalence check: it reuses only
the class-specific machinery (backbone, pooling, expansion, head, optimizer)
and never imports the clustering, foreground-removal, or region-assignment
code. A lam=0 run of the real trainer must match this bit for bit.
"""

import numpy as np
import torch

from protoseg.alignment import expand_class_specific
from protoseg.backbone import extract_features, init_backbone
from protoseg.config import RunConfig
from protoseg.data import make_class_split
from protoseg.experiments import next_train_episode, scene_params_from
from protoseg.head import CLASS_SPECIFIC, Prototype, compare, init_head, masked_average_pool


def baseline_train(config: RunConfig, steps: int) -> tuple[list[torch.Tensor], np.random.Generator]:
    """Train the single-branch baseline; returns (parameters, data rng)."""
    seeds = np.random.SeedSequence(config.train.seed).generate_state(4, np.uint64)
    backbone = init_backbone(config.backbone, int(seeds[0]))
    head = init_head(2 * config.backbone.feature_channels, config.head, int(seeds[1]))
    optimizer = torch.optim.SGD(
        list(backbone.parameters()) + list(head.parameters()),
        lr=config.train.lr,
        momentum=config.train.momentum,
    )
    data_rng = np.random.default_rng(int(seeds[2]))
    split = make_class_split(config.data.num_classes, config.data.fold, config.data.num_folds)
    params = scene_params_from(config)

    for _ in range(steps):
        episode = next_train_episode(config, split, params, data_rng)
        packs = [extract_features(img, m, backbone) for img, m in episode.support]
        pack_q = extract_features(episode.query_image, episode.query_mask, backbone)
        protos = [masked_average_pool(p.F, p.mask_feat) for p in packs]
        prototype = Prototype(
            vector=torch.stack([p.vector for p in protos]).mean(dim=0),
            kind=CLASS_SPECIFIC,
            source_mask_area=sum(p.source_mask_area for p in protos),
        )
        logits = compare(expand_class_specific(prototype, pack_q.F), head)
        target = torch.from_numpy(pack_q.mask_feat.astype(np.int64)).reshape(-1)
        loss = torch.nn.functional.cross_entropy(logits.reshape(-1, 2), target, reduction="mean")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    return list(backbone.parameters()) + list(head.parameters()), data_rng
