"""Static cost accounting and latency measurement.

Parameter and FLOP counts here are closed-form functions of the config and
input size; they never build a network. ``measure_flops`` and
``model.param_report`` provide the instantiated-model counterparts used to
cross-check them.

FLOP conventions
----------------
``conv_mac_only``
    One FLOP per multiply-accumulate of every convolution in the trainable
    modules (correction blocks, decoder, head). This is the default.
``conv_mac_plus_elementwise``
    Adds one FLOP per output element for each normalisation, activation,
    residual scale, residual add, FPN sum and bilinear resize in those modules.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
from torch import nn

from .backbone import MIN_INPUT_SIZE, pyramid_sizes
from .config import FcbNetConfig
from .decoder import head_param_count, smoothing_param_count
from .fcb import bottleneck_width, fcb_macs, fcb_param_count
from .model import FcbNet, ParamReport

CONV_MAC_ONLY = "conv_mac_only"
CONV_MAC_PLUS_ELEMENTWISE = "conv_mac_plus_elementwise"
CONVENTIONS = (CONV_MAC_ONLY, CONV_MAC_PLUS_ELEMENTWISE)

IMAGENET_CLASSES = 1000


@dataclass
class FlopReport:
    total_flops: int
    by_submodule: dict[str, int] = field(default_factory=dict)
    convention: str = CONV_MAC_ONLY

    @property
    def gflops(self) -> float:
        return self.total_flops / 1e9

    def to_dict(self) -> dict:
        return {
            "total_flops": self.total_flops,
            "gflops": self.gflops,
            "convention": self.convention,
            "by_submodule": dict(self.by_submodule),
        }


def backbone_param_count(variant_channels: Sequence[int], depths: Sequence[int], in_channels: int) -> tuple[int, int]:
    """Return (total, classifier) parameter counts of a ConvNeXt trunk."""
    c = list(variant_channels)
    total = in_channels * c[0] * 16 + c[0] + 2 * c[0]
    for i, (ch, depth) in enumerate(zip(c, depths)):
        if i > 0:
            total += 2 * c[i - 1] + 4 * c[i - 1] * ch + ch
        total += depth * (8 * ch * ch + 58 * ch)
    classifier = 2 * c[-1] + IMAGENET_CLASSES * c[-1] + IMAGENET_CLASSES
    return total + classifier, classifier


def count_params(config: FcbNetConfig) -> ParamReport:
    config.validate()
    spec = config.backbone.spec
    channels = spec.stage_channels
    bb_total, classifier = backbone_param_count(channels, spec.stage_depths, config.backbone.in_channels)
    bb_trainable = 0 if config.backbone.frozen else bb_total
    d = config.decoder.feature_dim
    fcb = sum(fcb_param_count(c, config.fcb) for c in channels) if config.use_fcb else 0
    dec = d * sum(channels) + (len(channels) + config.decoder.refine_depth) * smoothing_param_count(d)
    head = head_param_count(d, config.num_classes)
    parts = {
        "backbone": (bb_total, bb_trainable),
        "fcb": (fcb, fcb),
        "decoder": (dec, dec),
        "head": (head, head),
    }
    return ParamReport(
        total=sum(t for t, _ in parts.values()),
        trainable=sum(tr for _, tr in parts.values()),
        by_submodule=parts,
        classifier=classifier,
    )


def count_flops(config: FcbNetConfig, h: int, w: int, convention: str = CONV_MAC_ONLY) -> FlopReport:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown FLOP convention {convention!r}; expected one of {CONVENTIONS}")
    if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
        raise ValueError(f"input must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, got {h}x{w}")
    config.validate()
    extra = convention == CONV_MAC_PLUS_ELEMENTWISE
    channels = config.backbone.spec.stage_channels
    sizes = pyramid_sizes(h, w)
    d = config.decoder.feature_dim
    rows: dict[str, int] = {}

    if config.use_fcb:
        for i, (c, (fh, fw)) in enumerate(zip(channels, sizes)):
            n = fcb_macs(c, config.fcb, fh, fw)
            if extra:
                inner = bottleneck_width(c, config.fcb.bottleneck_ratio, config.fcb.c_min)
                # two GN + two GELU on the narrow path; scale + add at full width
                n += 4 * inner * fh * fw + 2 * c * fh * fw
            rows[f"fcb.{i}"] = n

    for i, (c, (fh, fw)) in enumerate(zip(channels, sizes)):
        rows[f"decoder.lateral.{i}"] = c * d * fh * fw
    smooth_mac = 9 * d * d
    for i, (fh, fw) in enumerate(sizes):
        n = smooth_mac * fh * fw
        if extra:
            n += 2 * d * fh * fw  # BN + GELU
            if i < len(sizes) - 1:
                n += 2 * d * fh * fw  # resize of the deeper map + sum
        rows[f"decoder.smooth.{i}"] = n
    h1, w1 = sizes[0]
    for j in range(config.decoder.refine_depth):
        rows[f"decoder.refine.{j}"] = (smooth_mac + (2 * d if extra else 0)) * h1 * w1
    rows["head.conv"] = (smooth_mac + (2 * d if extra else 0)) * h1 * w1
    k = config.num_classes
    rows["head.classifier"] = d * k * h1 * w1 + (k * h * w if extra else 0)
    return FlopReport(sum(rows.values()), rows, convention)


def measure_flops(model: FcbNet, h: int, w: int) -> FlopReport:
    """Conv MACs of the trainable modules, counted with forward hooks."""
    rows: dict[str, int] = {}
    handles = []

    def hook(name):
        def fn(mod: nn.Conv2d, inp, out):
            k = mod.kernel_size[0] * mod.kernel_size[1]
            rows[name] = rows.get(name, 0) + out.numel() // out.shape[0] * (mod.in_channels // mod.groups) * k

        return fn

    for prefix, sub in (("fcbs", model.fcbs), ("decoder", model.decoder), ("head", model.head)):
        if sub is None:
            continue
        for name, mod in sub.named_modules():
            if isinstance(mod, nn.Conv2d):
                handles.append(mod.register_forward_hook(hook(f"{prefix}.{name}")))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            device = next(model.parameters()).device
            model(torch.zeros(1, model.backbone.in_channels, h, w, device=device))
    finally:
        for hd in handles:
            hd.remove()
        model.train(was_training)
    return FlopReport(sum(rows.values()), rows, CONV_MAC_ONLY)


@dataclass
class LatencyStats:
    mean: float
    median: float
    p95: float
    samples: list[float]

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "p95": self.p95, "n": len(self.samples)}


def _percentile(values: Sequence[float], q: float) -> float:
    s = sorted(values)
    pos = (len(s) - 1) * q
    lo = int(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def benchmark_latency(
    model: Callable,
    input_shape: Sequence[int],
    warmup: int = 3,
    iters: int = 10,
    timer: Callable[[], float] = time.perf_counter,
) -> LatencyStats:
    """Per-image wall-clock latency at batch 1 on a single intra-op thread."""
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    shape = (1, *tuple(input_shape)[-3:])
    expected = getattr(getattr(model, "backbone", None), "in_channels", None)
    if expected is not None and shape[1] != expected:
        raise ValueError(f"model expects {expected} input channels, got input shape {tuple(input_shape)}")
    x = torch.randn(shape)
    if isinstance(model, nn.Module):
        model.eval()
        first = next(model.parameters(), None)
        if first is not None:
            x = x.to(first.device)
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    samples = []
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            for _ in range(iters):
                t0 = timer()
                model(x)
                samples.append(timer() - t0)
    finally:
        torch.set_num_threads(threads)
    return LatencyStats(statistics.fmean(samples), statistics.median(samples), _percentile(samples, 0.95), samples)


def cost_table(config: FcbNetConfig, h: int, w: int, convention: str = CONV_MAC_ONLY) -> list[dict]:
    """One row per submodule: name, params_total, params_trainable, flops.

    Row sums equal ``count_params`` and ``count_flops`` totals.
    """
    flops = count_flops(config, h, w, convention).by_submodule
    params = count_params(config)
    channels = config.backbone.spec.stage_channels
    d = config.decoder.feature_dim
    k = config.num_classes
    bb_total, bb_train = params.by_submodule["backbone"]
    rows = [{"name": "backbone", "params_total": bb_total, "params_trainable": bb_train, "flops": 0}]

    def add(name: str, n: int):
        rows.append({"name": name, "params_total": n, "params_trainable": n, "flops": flops[name]})

    if config.use_fcb:
        for i, c in enumerate(channels):
            add(f"fcb.{i}", fcb_param_count(c, config.fcb))
    for i, c in enumerate(channels):
        add(f"decoder.lateral.{i}", c * d)
    for i in range(len(channels)):
        add(f"decoder.smooth.{i}", smoothing_param_count(d))
    for j in range(config.decoder.refine_depth):
        add(f"decoder.refine.{j}", smoothing_param_count(d))
    add("head.conv", smoothing_param_count(d))
    add("head.classifier", d * k + k)
    return rows
