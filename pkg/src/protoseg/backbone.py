"""Small trainable convolutional feature extractor.

Produces two feature grids for one image: mid-level comparison features F
(channel-concat of the two early stage outputs, gradients flow) and
high-level clustering features F_bar (last stage output, gradients stopped).
The stop-gradient mirrors clustering on a frozen block: hard cluster
assignments are not differentiable, so nothing should try to train through
them. The last stage consequently receives no gradient at all and stays at
its (deterministic) random initialization, playing the role of a frozen
featurizer.

Everything runs in float64 for clean finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as tf
from torch import nn

from .config import BackboneConfig
from .data import downsample_mask
from .errors import NumericError, ShapeError

__all__ = ["FeaturePack", "Backbone", "init_backbone", "extract_features"]


@dataclass
class FeaturePack:
    F: torch.Tensor  # (h, w, c) mid-level, gradient-carrying
    F_bar: torch.Tensor  # (h, w, c_bar) high-level, detached
    mask_feat: np.ndarray | None  # (h, w) uint8 task mask at feature resolution


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        cfg.feature_hw  # validates image divisibility
        c_in = cfg.in_channels
        convs = []
        for c_out in cfg.stage_channels:
            convs.append(nn.Conv2d(c_in, c_out, kernel_size=3, padding=1).double())
            c_in = c_out
        self.convs = nn.ModuleList(convs)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Returns the per-stage activation maps (NCHW), post pooling."""
        # center [0,1] images so color directions spread over all octants,
        # which cosine-based clustering of the high-level features needs
        x = x - 0.5
        outs = []
        for conv, stride in zip(self.convs, self.cfg.stage_strides):
            x = torch.tanh(conv(x))
            if stride > 1:
                x = tf.avg_pool2d(x, kernel_size=stride, stride=stride)
            outs.append(x)
        return outs

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    """Deterministically initialized backbone: W ~ N(0, 1/fan_in), b = 0."""
    model = Backbone(cfg)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for conv in model.convs:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=tuple(conv.weight.shape))
            conv.weight.copy_(torch.from_numpy(w))
            conv.bias.zero_()
    return model


def _align_nn(x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbor resample of an NCHW map to the (coarser) target grid."""
    h, w = hw
    src_h, src_w = x.shape[-2:]
    if (src_h, src_w) == (h, w):
        return x
    rows = torch.from_numpy((np.arange(h) * src_h) // h)
    cols = torch.from_numpy((np.arange(w) * src_w) // w)
    return x.index_select(-2, rows).index_select(-1, cols)


def extract_features(image: np.ndarray, mask: np.ndarray | None, backbone: Backbone) -> FeaturePack:
    """Run the backbone on one image and resample its mask to feature scale.

    `mask=None` (query at inference) skips the mask field.
    """
    cfg = backbone.cfg
    if image.shape != (*cfg.image_size, cfg.in_channels):
        raise ShapeError(f"image shape {image.shape} != {(*cfg.image_size, cfg.in_channels)}")
    x = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float64)
    x = x.permute(2, 0, 1).unsqueeze(0)
    stage_outs = backbone(x)
    for i, out in enumerate(stage_outs):
        if not torch.isfinite(out).all():
            raise NumericError(f"non-finite activations in backbone stage {i}")
    h, w = cfg.feature_hw
    mid = torch.cat([_align_nn(stage_outs[0], (h, w)), _align_nn(stage_outs[1], (h, w))], dim=1)
    feat = mid.squeeze(0).permute(1, 2, 0)  # (h, w, c)
    feat_bar = stage_outs[2].squeeze(0).permute(1, 2, 0).detach()
    mask_feat = None if mask is None else downsample_mask(mask, h, w)
    return FeaturePack(F=feat, F_bar=feat_bar, mask_feat=mask_feat)
