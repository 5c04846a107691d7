"""Feature correction block: a scaled residual bottleneck over frozen features."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import FcbConfig

GN_EPS = 1e-5


def bottleneck_width(channels: int, ratio: float, c_min: int) -> int:
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    return max(c_min, math.floor(channels / ratio))


def select_groups(channels: int, preferred: int) -> int:
    """Largest divisor of ``channels`` not exceeding ``preferred``."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    for g in range(min(preferred, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def fcb_param_count(channels: int, config: FcbConfig) -> int:
    inner = bottleneck_width(channels, config.bottleneck_ratio, config.c_min)
    k = config.dw_kernel
    return 2 * channels * inner + k * k * inner + 4 * inner + 1


def fcb_macs(channels: int, config: FcbConfig, h: int, w: int) -> int:
    inner = bottleneck_width(channels, config.bottleneck_ratio, config.c_min)
    k = config.dw_kernel
    return (2 * channels * inner + k * k * inner) * h * w


class FeatureCorrectionBlock(nn.Module):
    """Residual correction ``y = x + alpha * f(x)``.

    ``f`` projects to a narrower width with a bias-free 1x1 conv, applies
    GroupNorm+GELU, a depthwise kxk conv, GroupNorm+GELU again, and projects
    back with a second bias-free 1x1 conv. The back-projection starts at zero,
    so a freshly built block is the identity.
    """

    def __init__(self, channels: int, config: FcbConfig | None = None):
        super().__init__()
        config = config or FcbConfig()
        config.validate()
        self.channels = channels
        self.inner = bottleneck_width(channels, config.bottleneck_ratio, config.c_min)
        groups = select_groups(self.inner, config.preferred_groups)
        k = config.dw_kernel
        self.pw1 = nn.Conv2d(channels, self.inner, 1, bias=False)
        self.gn1 = nn.GroupNorm(groups, self.inner, eps=GN_EPS)
        self.dw = nn.Conv2d(self.inner, self.inner, k, padding=(k - 1) // 2, groups=self.inner, bias=False)
        self.gn2 = nn.GroupNorm(groups, self.inner, eps=GN_EPS)
        self.pw2 = nn.Conv2d(self.inner, channels, 1, bias=False)
        self.alpha = nn.Parameter(torch.tensor(float(config.alpha_init)))
        nn.init.zeros_(self.pw2.weight)

    def correction(self, x: Tensor) -> Tensor:
        z = F.gelu(self.gn1(self.pw1(x)))
        z = F.gelu(self.gn2(self.dw(z)))
        return self.pw2(z)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"FCB built for {self.channels} channels, got {x.shape[1]}")
        return x + self.alpha * self.correction(x)


def fcb_forward(x: Tensor, block: FeatureCorrectionBlock) -> Tensor:
    return block(x)
