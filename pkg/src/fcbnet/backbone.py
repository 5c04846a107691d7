"""Frozen ConvNeXt feature extractor.

The network itself comes from ``torchvision.models.convnext``; this module adds
multispectral stem expansion, freezing, weight-file loading and the
four-level feature tap.

Weight files are safetensors containers. Two naming schemes are accepted:
torchvision's own ``state_dict`` keys, and the canonical ConvNeXt release
names, which are translated as follows::

    downsample_layers.0.0.*        -> features.0.0.*      (stem conv)
    downsample_layers.0.1.*        -> features.0.1.*      (stem norm)
    downsample_layers.{i}.0.*      -> features.{2i}.0.*   (i = 1..3, norm)
    downsample_layers.{i}.1.*      -> features.{2i}.1.*   (i = 1..3, conv)
    stages.{i}.{j}.dwconv.*        -> features.{2i+1}.{j}.block.0.*
    stages.{i}.{j}.norm.*          -> features.{2i+1}.{j}.block.2.*
    stages.{i}.{j}.pwconv1.*       -> features.{2i+1}.{j}.block.3.*
    stages.{i}.{j}.pwconv2.*       -> features.{2i+1}.{j}.block.5.*
    stages.{i}.{j}.gamma           -> features.{2i+1}.{j}.layer_scale  (reshaped to C,1,1)
    norm.*                         -> classifier.0.*
    head.*                         -> classifier.2.*
"""
from __future__ import annotations

import re
from pathlib import Path
from typing import NamedTuple

import torch
from torch import Tensor, nn
from torchvision.models import convnext

from .config import BackboneConfig

_BUILDERS = {
    "tiny": convnext.convnext_tiny,
    "small": convnext.convnext_small,
    "base": convnext.convnext_base,
    "large": convnext.convnext_large,
}
# published drop-path rates; inert because the backbone never leaves eval mode
_DROP_PATH = {"tiny": 0.1, "small": 0.4, "base": 0.5, "large": 0.5}

MIN_INPUT_SIZE = 32


class WeightsError(RuntimeError):
    pass


class FeaturePyramid(NamedTuple):
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor


def pyramid_sizes(h: int, w: int) -> list[tuple[int, int]]:
    """Spatial sizes of the stride 4/8/16/32 maps for an ``h`` x ``w`` input."""
    h, w = h // 4, w // 4
    sizes = [(h, w)]
    for _ in range(3):
        h, w = h // 2, w // 2
        sizes.append((h, w))
    return sizes


def adapt_stem(stem_weights: Tensor, in_channels: int) -> Tensor:
    """Expand an RGB stem kernel to ``in_channels`` input bands.

    Extra bands receive the per-filter mean of the three RGB slices.
    """
    if stem_weights.ndim != 4 or stem_weights.shape[1] != 3:
        raise ValueError(f"expected an RGB stem kernel (C1, 3, k, k), got {tuple(stem_weights.shape)}")
    if in_channels < 3:
        raise ValueError(f"in_channels must be >= 3 for stem expansion, got {in_channels}")
    if in_channels == 3:
        return stem_weights.clone()
    mean = stem_weights.mean(dim=1, keepdim=True)
    extra = mean.expand(-1, in_channels - 3, -1, -1)
    return torch.cat([stem_weights, extra], dim=1)


def canonical_to_torchvision(name: str) -> str:
    """Translate a canonical ConvNeXt parameter name to torchvision's layout."""
    m = re.fullmatch(r"downsample_layers\.(\d)\.(\d)\.(.+)", name)
    if m:
        i, j, rest = int(m[1]), int(m[2]), m[3]
        return f"features.0.{j}.{rest}" if i == 0 else f"features.{2 * i}.{j}.{rest}"
    m = re.fullmatch(r"stages\.(\d)\.(\d+)\.(\w+)(?:\.(.+))?", name)
    if m:
        i, j, part, rest = int(m[1]), int(m[2]), m[3], m[4]
        prefix = f"features.{2 * i + 1}.{j}"
        if part == "gamma":
            return f"{prefix}.layer_scale"
        idx = {"dwconv": 0, "norm": 2, "pwconv1": 3, "pwconv2": 5}.get(part)
        if idx is None:
            raise WeightsError(f"unrecognised ConvNeXt parameter {name!r}")
        return f"{prefix}.block.{idx}.{rest}"
    if name.startswith("norm."):
        return "classifier.0." + name[len("norm."):]
    if name.startswith("head."):
        return "classifier.2." + name[len("head."):]
    return name


class Backbone(nn.Module):
    """ConvNeXt trunk that returns its four stage outputs.

    The classification head is kept (and counted) so that loaded pretrained
    checkpoints round-trip, but it is never evaluated.
    """

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.stage_channels = config.spec.stage_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.init_seed)
            net = _BUILDERS[config.variant](stochastic_depth_prob=_DROP_PATH[config.variant])
        self.features = net.features
        self.classifier = net.classifier
        if config.in_channels != 3:
            self._replace_stem(config.in_channels)
        if config.weights_source is not None:
            self.load_weights(config.weights_source)
        if config.frozen:
            for p in self.parameters():
                p.requires_grad_(False)
        self.eval()

    @property
    def stem(self) -> nn.Conv2d:
        return self.features[0][0]

    @property
    def in_channels(self) -> int:
        return self.stem.in_channels

    def _replace_stem(self, in_channels: int) -> None:
        old = self.stem
        new = nn.Conv2d(in_channels, old.out_channels, kernel_size=4, stride=4)
        with torch.no_grad():
            if in_channels >= 3:
                new.weight.copy_(adapt_stem(old.weight, in_channels))
            else:
                new.weight.copy_(old.weight[:, :in_channels])
            new.bias.copy_(old.bias)
        self.features[0][0] = new

    def load_weights(self, path: str | Path) -> None:
        from safetensors.torch import load_file

        path = Path(path)
        if not path.is_file():
            raise WeightsError(f"weights file not found: {path}")
        raw = load_file(str(path))
        if raw and all(k.startswith("model.") for k in raw):
            raw = {k.removeprefix("model."): v for k, v in raw.items()}
        state = {}
        for k, v in raw.items():
            name = canonical_to_torchvision(k)
            if name.endswith("layer_scale") and v.ndim == 1:
                v = v.reshape(-1, 1, 1)
            state[name] = v
        stem_key = "features.0.0.weight"
        own = self.state_dict()
        if stem_key in state and state[stem_key].shape[1] != self.in_channels:
            if state[stem_key].shape[1] == 3 and self.in_channels >= 3:
                state[stem_key] = adapt_stem(state[stem_key], self.in_channels)
        missing = [k for k in own if k not in state]
        unexpected = [k for k in state if k not in own]
        if missing or unexpected:
            raise WeightsError(
                f"weights file {path} does not match convnext_{self.config.variant}: "
                f"{len(missing)} missing, {len(unexpected)} unexpected (e.g. {(missing + unexpected)[:3]})"
            )
        for k, v in state.items():
            if own[k].shape != v.shape:
                raise WeightsError(f"shape mismatch for {k}: file {tuple(v.shape)} vs model {tuple(own[k].shape)}")
        self.load_state_dict(state)

    def train(self, mode: bool = True) -> "Backbone":
        # the trunk is a fixed feature extractor; keep drop-path and norms in inference mode
        return super().train(False)

    def forward(self, images: Tensor) -> FeaturePyramid:
        if images.ndim != 4:
            raise ValueError(f"expected a (B, C, H, W) tensor, got shape {tuple(images.shape)}")
        if images.shape[1] != self.in_channels:
            raise ValueError(f"backbone expects {self.in_channels} input channels, got {images.shape[1]}")
        h, w = images.shape[-2:]
        if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
            raise ValueError(f"input must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, got {h}x{w}")
        taps = []
        x = images
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i % 2 == 1:
                taps.append(x)
        return FeaturePyramid(*taps)


def build_backbone(config: BackboneConfig) -> Backbone:
    return Backbone(config)


def extract_features(backbone: Backbone, images: Tensor) -> FeaturePyramid:
    if backbone.config.frozen:
        with torch.no_grad():
            return backbone(images)
    return backbone(images)
