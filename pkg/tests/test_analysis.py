import itertools

import pytest
import torch

from conftest import make_config
from fcbnet.analysis import (
    CONV_MAC_ONLY,
    CONV_MAC_PLUS_ELEMENTWISE,
    benchmark_latency,
    cost_table,
    count_flops,
    count_params,
    measure_flops,
)
from fcbnet.backbone import pyramid_sizes
from fcbnet.config import FcbConfig
from fcbnet.fcb import bottleneck_width
from fcbnet.model import build_fcbnet, param_report

BASE = (128, 256, 512, 1024)


def _fcb_macs_by_hand(channels, h, w, cfg=FcbConfig()):
    total = 0
    for c, (sh, sw) in zip(channels, pyramid_sizes(h, w)):
        inner = bottleneck_width(c, cfg.bottleneck_ratio, cfg.c_min)
        total += sh * sw * (2 * c * inner + cfg.dw_kernel**2 * inner)
    return total


def test_fcb_flops_match_hand_count():
    rep = count_flops(make_config("base"), 512, 512)
    fcb = sum(v for k, v in rep.by_submodule.items() if k.startswith("fcb."))
    assert fcb == _fcb_macs_by_hand(BASE, 512, 512)
    assert abs(fcb / 1e9 - 1.09144) < 1e-4


def test_sweep_flop_deltas():
    def g(**kw):
        return count_flops(make_config("base", **kw), 512, 512).total_flops

    # k^2 C' extra per pixel at every stage
    dk = sum(sh * sw * (9 - 1) * bottleneck_width(c, 2, 64) for c, (sh, sw) in zip(BASE, pyramid_sizes(512, 512)))
    assert g(fcb__dw_kernel=3) - g(fcb__dw_kernel=1) == dk
    assert g(decoder__refine_depth=3) - g(decoder__refine_depth=2) == 9 * 128 * 128 * 128 * 128
    assert g(decoder__feature_dim=128) > g(decoder__feature_dim=96)
    assert g(use_fcb=True) - g(use_fcb=False) == _fcb_macs_by_hand(BASE, 512, 512)


def test_flops_monotone_in_resolution():
    cfg = make_config("base", in_channels=5)
    assert count_flops(cfg, 480, 360).total_flops < count_flops(cfg, 512, 512).total_flops


def test_extended_convention_adds_elementwise_terms():
    cfg = make_config("tiny")
    a = count_flops(cfg, 128, 128, CONV_MAC_ONLY)
    b = count_flops(cfg, 128, 128, CONV_MAC_PLUS_ELEMENTWISE)
    assert b.total_flops > a.total_flops
    assert b.convention == CONV_MAC_PLUS_ELEMENTWISE
    with pytest.raises(ValueError):
        count_flops(cfg, 128, 128, "bogus")


@pytest.mark.parametrize("hw", [(64, 64), (97, 65), (128, 96)])
def test_measured_flops_equal_analytic(tiny_model, hw):
    assert measure_flops(tiny_model, *hw).total_flops == count_flops(tiny_model.config, *hw).total_flops


def test_measured_flops_rows_equal_analytic_for_base(base_model):
    analytic = count_flops(base_model.config, 64, 64)
    measured = measure_flops(base_model, 64, 64)
    assert measured.total_flops == analytic.total_flops
    assert measured.to_dict()["total_flops"] == analytic.total_flops


@pytest.mark.parametrize(
    "variant, channels, kw",
    list(itertools.product(["tiny", "base"], [3, 5], [{}, {"use_fcb": False}, {"fcb__bottleneck_ratio": 3}])),
)
def test_closed_form_params_match_instance(variant, channels, kw):
    cfg = make_config(variant, in_channels=channels, **kw)
    analytic = count_params(cfg)
    instance = param_report(build_fcbnet(cfg))
    assert (analytic.total, analytic.trainable) == (instance.total, instance.trainable)
    assert analytic.by_submodule == instance.by_submodule


def test_cost_table_rows_sum_to_totals():
    cfg = make_config("base")
    rows = cost_table(cfg, 512, 512)
    params = count_params(cfg)
    assert sum(r["params_total"] for r in rows) == params.total
    assert sum(r["params_trainable"] for r in rows) == params.trainable == 2_685_126
    assert sum(r["flops"] for r in rows) == count_flops(cfg, 512, 512).total_flops


def test_benchmark_uses_timer_and_counts_iterations():
    ticks = iter(range(1000))
    calls = []

    def model(x):
        calls.append(x.shape)
        return x

    stats = benchmark_latency(model, (3, 32, 32), warmup=3, iters=10, timer=lambda: float(next(ticks)))
    assert len(calls) == 13 and calls[0] == (1, 3, 32, 32)
    assert len(stats.samples) == 10
    assert stats.mean == stats.median == stats.p95 == 1.0


def test_benchmark_single_iteration_and_errors(tiny_model):
    stats = benchmark_latency(tiny_model, (3, 32, 32), warmup=0, iters=1)
    assert len(stats.samples) == 1 and stats.p95 == stats.samples[0] > 0
    with pytest.raises(ValueError):
        benchmark_latency(tiny_model, (4, 32, 32))
    with pytest.raises(ValueError):
        benchmark_latency(tiny_model, (3, 32, 32), iters=0)


def test_benchmark_restores_thread_count(tiny_model):
    before = torch.get_num_threads()
    benchmark_latency(tiny_model, (3, 32, 32), warmup=0, iters=1)
    assert torch.get_num_threads() == before


@pytest.mark.slow
def test_tiny_faster_than_large(tiny_model):
    large = build_fcbnet(make_config("large"))
    t = benchmark_latency(tiny_model, (3, 128, 128), warmup=1, iters=3).median
    l = benchmark_latency(large, (3, 128, 128), warmup=1, iters=3).median
    assert t < l
