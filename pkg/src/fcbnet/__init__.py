"""FCBNet: frozen ConvNeXt segmentation with feature correction blocks."""
from .config import BackboneConfig, DecoderConfig, FcbConfig, FcbNetConfig, TrainConfig
from .model import FcbNet, ParamReport, build_fcbnet, param_report

__all__ = [
    "BackboneConfig",
    "DecoderConfig",
    "FcbConfig",
    "FcbNetConfig",
    "TrainConfig",
    "FcbNet",
    "ParamReport",
    "build_fcbnet",
    "param_report",
]
__version__ = "0.1.0"
