"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""
import time

import numpy as np
import pytest
import torch

from conftest import make_config
from fcbnet.analysis import count_flops, count_params
from fcbnet.config import FcbConfig, TrainConfig
from fcbnet.fcb import FeatureCorrectionBlock
from fcbnet.metrics import ConfusionMatrix
from fcbnet.model import build_fcbnet, param_report
from fcbnet.synthetic import blob_dataset
from fcbnet.training import checkpoint_roundtrip, evaluate, fit


def _m(n):
    return round(n / 1e6, 3)


def test_criterion_1_trainable_table(acceptance_report):
    cases = {}
    for r, want in zip([1, 2, 3, 4, 5], [4.090, 2.685, 2.221, 1.991, 1.857]):
        cases[f"ratio={r}"] = (make_config(fcb__bottleneck_ratio=r), want)
    for k, want in zip([1, 3, 5, 7], [2.677, 2.685, 2.700, 2.724]):
        cases[f"kernel={k}"] = (make_config(fcb__dw_kernel=k), want)
    for d, want in zip([96, 128], [2.172, 2.685]):
        cases[f"fpn_dim={d}"] = (make_config(decoder__feature_dim=d), want)
    for j, want in zip(range(6), [2.390, 2.537, 2.685, 2.833, 2.981, 3.128]):
        cases[f"refine={j}"] = (make_config(decoder__refine_depth=j), want)
    cases["no_fcb"] = (make_config(use_fcb=False), 1.280)
    for v, want in zip(["tiny", "base", "large"], [2.015, 2.685, 4.555]):
        cases[f"variant={v}"] = (make_config(v), want)

    got = {name: _m(count_params(cfg).trainable) for name, (cfg, _) in cases.items()}
    # the default and tiny configurations are also instantiated and counted
    for name in ("ratio=2", "variant=tiny"):
        got[name + " (instance)"] = _m(param_report(build_fcbnet(cases[name][0])).trainable)
        cases[name + " (instance)"] = cases[name]
    bad = {n: (got[n], w) for n, (_, w) in cases.items() if got[n] != w}
    acceptance_report(1, not bad, f"{len(cases) - len(bad)}/{len(cases)} table cells exact" + (f"; mismatches {bad}" if bad else ""))
    assert not bad


def test_criterion_2_reductions(acceptance_report):
    tiny = count_params(make_config("tiny"))
    large = count_params(make_config("large"))
    r_tiny = 1 - _m(tiny.trainable) / _m(tiny.total)
    r_large = 1 - _m(large.trainable) / _m(large.total)
    ok = _m(tiny.total) == 30.604 and r_tiny >= 0.93 and r_large >= 0.975
    acceptance_report(2, ok, f"tiny 1-2.015/{_m(tiny.total)} = {r_tiny:.4f}, large {r_large:.4f}")
    assert ok


def test_criterion_3_flop_deltas(acceptance_report):
    t0 = time.perf_counter()

    def g(**kw):
        return count_flops(make_config("base", **kw), 512, 512).total_flops / 1e9

    deltas = {
        "fcb": (g(use_fcb=True) - g(use_fcb=False), 1.07, 1.14),
        "k3-k1": (g(fcb__dw_kernel=3) - g(fcb__dw_kernel=1), 0.014, 0.017),
        "refine3-2": (g(decoder__refine_depth=3) - g(decoder__refine_depth=2), 2.40, 2.45),
        "D128-D96": (g(decoder__feature_dim=128) - g(decoder__feature_dim=96), 4.68, 4.74),
    }
    elapsed = time.perf_counter() - t0
    ok = all(lo <= v <= hi for v, lo, hi in deltas.values()) and elapsed < 1.0
    detail = ", ".join(f"{k} {v:.4f} G" for k, (v, _, _) in deltas.items())
    acceptance_report(3, ok, f"{detail}; {elapsed * 1000:.1f} ms")
    assert ok


def test_criterion_4_alpha_zero_identity(acceptance_report):
    torch.manual_seed(0)
    with_fcb = build_fcbnet(make_config("base"), seed=0)
    with torch.no_grad():
        for b in with_fcb.fcbs:
            b.pw2.weight.normal_()  # non-trivial corrections, switched off by alpha
            b.alpha.zero_()
    without = build_fcbnet(make_config("base", use_fcb=False), seed=1)
    without.load_state_dict({k: v for k, v in with_fcb.state_dict().items() if not k.startswith("fcbs.")})
    with_fcb.eval()
    without.eval()
    same = 0
    g = torch.Generator().manual_seed(4)
    with torch.no_grad():
        for _ in range(10):
            x = torch.randn(1, 3, 64, 64, generator=g)
            same += torch.equal(with_fcb(x), without(x))
    acceptance_report(4, same == 10, f"{same}/10 inputs bit-identical")
    assert same == 10


def test_criterion_5_freezing(acceptance_report):
    model = build_fcbnet(make_config("tiny"), seed=0)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    fit(model, blob_dataset(n=8, size=64, seed=1), TrainConfig(epochs=10, batch_size=8, max_lr=1e-3), max_steps=10)
    after = model.state_dict()
    backbone_same = all(torch.equal(before[k], after[k]) for k in before if k.startswith("backbone."))

    def changed(prefix):
        return any(not torch.equal(before[k], after[k]) for k in before if k.startswith(prefix))

    units = [f"fcbs.{i}." for i in range(4)]
    units += [f"decoder.smooth.{i}." for i in range(4)] + [f"decoder.refine.{j}." for j in range(2)]
    units += ["head."]
    stale = [u for u in units if not changed(u)]
    ok = backbone_same and not stale
    acceptance_report(5, ok, f"backbone unchanged: {backbone_same}; trainable units updated {len(units) - len(stale)}/{len(units)}")
    assert ok


@pytest.mark.parametrize("channels", [3, 4, 5])
def test_criterion_6_shape_contract(acceptance_report, channels):
    model = build_fcbnet(make_config("base", in_channels=channels)).eval()
    shapes = []
    with torch.no_grad():
        for hw in ((512, 512), (480, 360), (97, 65)):
            shapes.append(tuple(model(torch.randn(1, channels, *hw)).shape) == (1, 2, *hw))
    # batch dimension passes through
    with torch.no_grad():
        shapes.append(tuple(model(torch.randn(2, channels, 97, 65)).shape) == (2, 2, 97, 65))
    ok = all(shapes)
    acceptance_report(6, ok, f"C_in={channels}: {sum(shapes)}/{len(shapes)} shapes (B,2,H,W)")
    assert ok


def _brute_force_iou(pred, target, k):
    out = []
    for c in range(k):
        p = {i for i, v in enumerate(pred.ravel()) if v == c}
        t = {i for i, v in enumerate(target.ravel()) if v == c}
        u = p | t
        out.append(len(p & t) / len(u) if u else 1.0)
    return out


def test_criterion_7_metrics_oracle(acceptance_report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        pred = rng.integers(0, 2, (16, 16))
        target = rng.integers(0, 2, (16, 16))
        got = ConfusionMatrix(2).accumulate(pred, target).iou_scores().per_class
        worst = max(worst, float(np.max(np.abs(np.array(got) - _brute_force_iou(pred, target, 2)))))
    target = np.zeros((16, 16), int)
    target[:8] = 1
    hand = ConfusionMatrix(2).accumulate(np.zeros((16, 16), int), target).iou_scores().miou
    ok = worst <= 1e-12 and hand == 0.25
    acceptance_report(7, ok, f"max |diff| {worst:.1e} over 100 pairs; hand case mIoU {hand}")
    assert ok


def _alpha_fd_error():
    block = FeatureCorrectionBlock(16, FcbConfig(c_min=8)).double()
    g = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * 0.5)
    x = torch.randn(2, 16, 6, 6, generator=g, dtype=torch.float64)
    w = torch.randn(2, 16, 6, 6, generator=g, dtype=torch.float64)
    block.zero_grad()
    (block(x) * w).sum().backward()
    analytic = block.alpha.grad.item()
    eps = 1e-6
    with torch.no_grad():
        a0 = block.alpha.item()
        block.alpha.fill_(a0 + eps)
        up = (block(x) * w).sum().item()
        block.alpha.fill_(a0 - eps)
        down = (block(x) * w).sum().item()
    numeric = (up - down) / (2 * eps)
    return abs(analytic - numeric) / abs(numeric)


def test_criterion_8_training_smoke(acceptance_report):
    t0 = time.perf_counter()
    data = blob_dataset(n=8, size=64, seed=0)
    model = build_fcbnet(make_config("tiny"), seed=0)
    hist = fit(model, data, TrainConfig(max_lr=1e-3, epochs=200, batch_size=8, seed=0))
    miou = evaluate(model, data, latency=False)["miou"]
    elapsed = time.perf_counter() - t0
    fd = _alpha_fd_error()
    steps = len(hist.lrs)
    ok = steps == 200 and miou >= 0.95 and elapsed < 300 and fd <= 1e-3
    acceptance_report(8, ok, f"{steps} steps, train mIoU {miou:.4f} in {elapsed:.1f} s; alpha grad rel. error {fd:.1e}")
    assert ok


def test_criterion_9_determinism_and_persistence(acceptance_report, tmp_path):
    data = blob_dataset(n=8, size=64, seed=2)
    cfg = TrainConfig(epochs=1, batch_size=4, seed=7)
    losses = []
    for _ in range(2):
        model = build_fcbnet(make_config("tiny"), seed=7)
        losses.append(fit(model, data, cfg).losses[0])
    model.eval()
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        ref = model(x)
        restored = checkpoint_roundtrip(model, tmp_path / "ck")(x)
    same_loss = losses[0] == losses[1]
    same_logits = torch.equal(ref, restored)
    ok = same_loss and same_logits
    acceptance_report(9, ok, f"epoch-1 losses {losses[0]:.6f} / {losses[1]:.6f}; checkpoint logits bit-identical: {same_logits}")
    assert ok
