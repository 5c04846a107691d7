"""FCBNet assembly: frozen ConvNeXt, per-stage correction blocks, FPN decoder, head."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .backbone import Backbone, extract_features
from .config import FcbNetConfig
from .decoder import FPNDecoder, SegmentationHead
from .fcb import FeatureCorrectionBlock


@dataclass
class ParamReport:
    total: int
    trainable: int
    by_submodule: dict[str, tuple[int, int]] = field(default_factory=dict)
    # frozen, never-evaluated ImageNet classifier kept inside the backbone
    classifier: int = 0

    @property
    def frozen(self) -> int:
        return self.total - self.trainable

    @property
    def total_without_classifier(self) -> int:
        return self.total - self.classifier

    @property
    def reduction(self) -> float:
        """Fraction of parameters excluded from training."""
        return 1.0 - self.trainable / self.total

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "trainable": self.trainable,
            "frozen": self.frozen,
            "classifier": self.classifier,
            "total_without_classifier": self.total_without_classifier,
            "reduction": self.reduction,
            "by_submodule": {k: {"total": t, "trainable": tr} for k, (t, tr) in self.by_submodule.items()},
        }


class FcbNet(nn.Module):
    def __init__(self, config: FcbNetConfig | None = None):
        super().__init__()
        config = config or FcbNetConfig()
        config.validate()
        self.config = config
        self.backbone = Backbone(config.backbone)
        channels = self.backbone.stage_channels
        if config.use_fcb:
            self.fcbs = nn.ModuleList(FeatureCorrectionBlock(c, config.fcb) for c in channels)
        else:
            self.fcbs = None
        self.decoder = FPNDecoder(channels, config.decoder)
        self.head = SegmentationHead(config.decoder.feature_dim, config.num_classes, config.decoder.dropout_rate)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, images: Tensor) -> Tensor:
        feats = list(extract_features(self.backbone, images))
        # corrections feed the decoder only; the frozen trunk never sees them
        if self.fcbs is not None:
            feats = [block(f) for block, f in zip(self.fcbs, feats)]
        return self.head(self.decoder(feats), tuple(images.shape[-2:]))


def build_fcbnet(config: FcbNetConfig | None = None, seed: int | None = None) -> FcbNet:
    """Build the model; ``seed`` fixes the init of the trainable parts."""
    if seed is None:
        return FcbNet(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FcbNet(config)


def forward(model: FcbNet, images: Tensor, training_mode: bool = False) -> Tensor:
    model.train(training_mode)
    if training_mode:
        return model(images)
    with torch.no_grad():
        return model(images)


def _count(module: nn.Module | None) -> tuple[int, int]:
    if module is None:
        return 0, 0
    params = list(module.parameters())
    return sum(p.numel() for p in params), sum(p.numel() for p in params if p.requires_grad)


def param_report(model: FcbNet) -> ParamReport:
    parts = {
        "backbone": _count(model.backbone),
        "fcb": _count(model.fcbs),
        "decoder": _count(model.decoder),
        "head": _count(model.head),
    }
    return ParamReport(
        total=sum(t for t, _ in parts.values()),
        trainable=sum(tr for _, tr in parts.values()),
        by_submodule=parts,
        classifier=_count(model.backbone.classifier)[0],
    )
