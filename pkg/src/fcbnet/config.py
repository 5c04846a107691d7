"""Configuration records for the model, its parts, and training.

All records are plain dataclasses so they round-trip through ``asdict`` and
YAML/JSON documents without custom encoders.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Optional

STAGE_CHANNELS = {
    "tiny": (96, 192, 384, 768),
    "small": (96, 192, 384, 768),
    "base": (128, 256, 512, 1024),
    "large": (192, 384, 768, 1536),
}
STAGE_DEPTHS = {
    "tiny": (3, 3, 9, 3),
    "small": (3, 3, 27, 3),
    "base": (3, 3, 27, 3),
    "large": (3, 3, 27, 3),
}
VARIANTS = tuple(STAGE_CHANNELS)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneVariant:
    name: str
    stage_channels: tuple[int, int, int, int]
    stage_depths: tuple[int, int, int, int]

    @classmethod
    def from_name(cls, name: str) -> "BackboneVariant":
        if name not in STAGE_CHANNELS:
            raise ConfigError(f"unknown ConvNeXt variant {name!r}; expected one of {', '.join(VARIANTS)}")
        return cls(name, STAGE_CHANNELS[name], STAGE_DEPTHS[name])


@dataclass
class BackboneConfig:
    variant: str = "base"
    in_channels: int = 3
    frozen: bool = True
    weights_source: Optional[str] = None
    # seeds the random init used when no weights file is given
    init_seed: int = 0

    def validate(self) -> None:
        BackboneVariant.from_name(self.variant)
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")

    @property
    def spec(self) -> BackboneVariant:
        return BackboneVariant.from_name(self.variant)


@dataclass
class FcbConfig:
    alpha_init: float = 0.07
    bottleneck_ratio: float = 2.0
    c_min: int = 64
    dw_kernel: int = 3
    preferred_groups: int = 32

    def validate(self) -> None:
        if self.dw_kernel not in (1, 3, 5, 7):
            raise ConfigError(f"dw_kernel must be one of 1, 3, 5, 7, got {self.dw_kernel}")
        if self.bottleneck_ratio < 1:
            raise ConfigError(f"bottleneck_ratio must be >= 1, got {self.bottleneck_ratio}")
        if self.c_min < 1:
            raise ConfigError(f"c_min must be >= 1, got {self.c_min}")
        if self.preferred_groups < 1:
            raise ConfigError(f"preferred_groups must be >= 1, got {self.preferred_groups}")


@dataclass
class DecoderConfig:
    feature_dim: int = 128
    refine_depth: int = 2
    dropout_rate: float = 0.1

    def validate(self) -> None:
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.refine_depth < 0:
            raise ConfigError(f"refine_depth must be >= 0, got {self.refine_depth}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass
class FcbNetConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fcb: FcbConfig = field(default_factory=FcbConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    num_classes: int = 2
    use_fcb: bool = True

    def validate(self) -> None:
        self.backbone.validate()
        self.fcb.validate()
        self.decoder.validate()
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FcbNetConfig":
        d = dict(d)
        return cls(
            backbone=_build(BackboneConfig, d.pop("backbone", {}), "backbone"),
            fcb=_build(FcbConfig, d.pop("fcb", {}), "fcb"),
            decoder=_build(DecoderConfig, d.pop("decoder", {}), "decoder"),
            **_checked(cls, d, "model", skip={"backbone", "fcb", "decoder"}),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    max_lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    seed: int = 0
    class_weights: Optional[list[float]] = None
    hflip: bool = False
    vflip: bool = False
    rot90: bool = False

    def validate(self) -> None:
        if self.max_lr <= 0:
            raise ConfigError(f"max_lr must be > 0, got {self.max_lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.pct_start < 1.0:
            raise ConfigError(f"pct_start must lie in (0, 1), got {self.pct_start}")
        if self.div_factor <= 1 or self.final_div_factor <= 1:
            raise ConfigError("div_factor and final_div_factor must be > 1")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        kw = _checked(cls, d, "train")
        if "betas" in kw:
            kw["betas"] = tuple(kw["betas"])
        return cls(**kw)


def _checked(cls, d: dict[str, Any], section: str, skip: frozenset | set = frozenset()) -> dict[str, Any]:
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return dict(d)


def _build(cls, d: dict[str, Any], section: str):
    return cls(**_checked(cls, d or {}, section))
