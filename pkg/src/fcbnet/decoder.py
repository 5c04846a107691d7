"""Lightweight FPN decoder and segmentation head."""
from __future__ import annotations

from typing import Sequence

import torch.nn.functional as F
from torch import Tensor, nn

from .config import DecoderConfig

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class SmoothingBlock(nn.Sequential):
    """3x3 conv -> BatchNorm -> GELU at constant width."""

    def __init__(self, dim: int):
        super().__init__(
            nn.Conv2d(dim, dim, 3, padding=1, bias=False),
            nn.BatchNorm2d(dim, eps=BN_EPS, momentum=BN_MOMENTUM),
            nn.GELU(),
        )


class FPNDecoder(nn.Module):
    """Top-down fusion of a four-level pyramid into a stride-4 map.

    Deeper maps are resized to the exact size of the next lateral rather than
    by a fixed factor of two, so odd intermediate sizes (e.g. 45 vs 2*22 rows
    for a 360-pixel input) fuse cleanly.
    """

    def __init__(self, stage_channels: Sequence[int], config: DecoderConfig | None = None):
        super().__init__()
        config = config or DecoderConfig()
        config.validate()
        dim = config.feature_dim
        self.stage_channels = tuple(stage_channels)
        self.lateral = nn.ModuleList(nn.Conv2d(c, dim, 1, bias=False) for c in stage_channels)
        self.smooth = nn.ModuleList(SmoothingBlock(dim) for _ in stage_channels)
        self.refine = nn.Sequential(*(SmoothingBlock(dim) for _ in range(config.refine_depth)))

    def forward(self, feats: Sequence[Tensor]) -> Tensor:
        if len(feats) != len(self.lateral):
            raise ValueError(f"decoder expects {len(self.lateral)} pyramid levels, got {len(feats)}")
        for i, (f, c) in enumerate(zip(feats, self.stage_channels)):
            if f.shape[1] != c:
                raise ValueError(f"pyramid level {i + 1} has {f.shape[1]} channels, decoder expects {c}")
        top = len(feats) - 1
        p = self.smooth[top](self.lateral[top](feats[top]))
        for i in range(top - 1, -1, -1):
            lat = self.lateral[i](feats[i])
            p = self.smooth[i](lat + _resize(p, lat.shape[-2:]))
        return self.refine(p)


class SegmentationHead(nn.Module):
    def __init__(self, dim: int, num_classes: int, dropout_rate: float = 0.1):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(dim, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.act = nn.GELU()
        self.dropout = nn.Dropout(dropout_rate)
        self.classifier = nn.Conv2d(dim, num_classes, 1)

    def forward(self, x: Tensor, out_hw: tuple[int, int]) -> Tensor:
        if out_hw[0] < 1 or out_hw[1] < 1:
            raise ValueError(f"target size must be positive, got {out_hw}")
        x = self.dropout(self.act(self.bn(self.conv(x))))
        return _resize(self.classifier(x), tuple(out_hw))


def smoothing_param_count(dim: int) -> int:
    return 9 * dim * dim + 2 * dim


def head_param_count(dim: int, num_classes: int) -> int:
    return smoothing_param_count(dim) + dim * num_classes + num_classes


def decoder_param_count(stage_channels: Sequence[int], config: DecoderConfig, num_classes: int) -> int:
    """Trainable parameters of the decoder plus head (BN running stats excluded)."""
    d = config.feature_dim
    laterals = d * sum(stage_channels)
    smoothing = (len(stage_channels) + config.refine_depth) * smoothing_param_count(d)
    return laterals + smoothing + head_param_count(d, num_classes)
