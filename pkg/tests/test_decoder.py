import pytest
import torch

from fcbnet.backbone import pyramid_sizes
from fcbnet.config import DecoderConfig
from fcbnet.decoder import (
    FPNDecoder,
    SegmentationHead,
    decoder_param_count,
    smoothing_param_count,
)

BASE = (128, 256, 512, 1024)


def _pyramid(channels, h, w, batch=1):
    return [torch.randn(batch, c, sh, sw) for c, (sh, sw) in zip(channels, pyramid_sizes(h, w))]


def _trainable(*modules):
    return sum(p.numel() for m in modules for p in m.parameters() if p.requires_grad)


@pytest.mark.parametrize(
    "dim, refine, expected",
    [(128, 2, 1_280_002), (96, 2, 766_466), (128, 3, 1_280_002 + 147_712)],
)
def test_decoder_param_count(dim, refine, expected):
    cfg = DecoderConfig(feature_dim=dim, refine_depth=refine)
    assert decoder_param_count(BASE, cfg, 2) == expected
    dec, head = FPNDecoder(BASE, cfg), SegmentationHead(dim, 2)
    assert _trainable(dec, head) == expected


def test_refine_zero_removes_two_smoothing_blocks():
    full = decoder_param_count(BASE, DecoderConfig(refine_depth=2), 2)
    none = decoder_param_count(BASE, DecoderConfig(refine_depth=0), 2)
    assert full - none == 2 * smoothing_param_count(128) == 2 * (9 * 128**2 + 2 * 128)


def test_only_classifier_has_bias():
    dec, head = FPNDecoder(BASE), SegmentationHead(128, 2)
    convs = [m for m in list(dec.modules()) + list(head.modules()) if isinstance(m, torch.nn.Conv2d)]
    assert [m.bias is not None for m in convs].count(True) == 1
    assert head.classifier.bias is not None


def test_decode_shape_512():
    dec = FPNDecoder(BASE).eval()
    with torch.no_grad():
        out = dec(_pyramid(BASE, 512, 512))
    assert out.shape == (1, 128, 128, 128)


def test_decode_480x360_resizes_to_target():
    dec = FPNDecoder(BASE).eval()
    with torch.no_grad():
        out = dec(_pyramid(BASE, 480, 360, batch=2))
    assert out.shape == (2, 128, 120, 90)


@pytest.mark.parametrize("hw", [(97, 65), (33, 250), (64, 64)])
def test_decode_any_size(hw):
    ch = (8, 16, 24, 32)
    dec = FPNDecoder(ch, DecoderConfig(feature_dim=8, refine_depth=1)).eval()
    with torch.no_grad():
        out = dec(_pyramid(ch, *hw))
    assert out.shape[-2:] == pyramid_sizes(*hw)[0]


def test_decoder_errors():
    dec = FPNDecoder(BASE)
    with pytest.raises(ValueError):
        dec([])
    bad = _pyramid(BASE, 64, 64)
    bad[2] = torch.randn(1, 7, 4, 4)
    with pytest.raises(ValueError, match="channels"):
        dec(bad)


def test_head_shapes_and_determinism():
    head = SegmentationHead(128, 2, dropout_rate=0.5).eval()
    x = torch.randn(2, 128, 32, 32)
    with torch.no_grad():
        a = head(x, (128, 128))
        b = head(x, (128, 128))
    assert a.shape == (2, 2, 128, 128)
    assert torch.equal(a, b)
    with torch.no_grad():
        assert head(x, (97, 65)).shape[-2:] == (97, 65)


def test_head_dropout_active_in_training():
    head = SegmentationHead(16, 2, dropout_rate=0.5).train()
    x = torch.randn(1, 16, 8, 8)
    assert not torch.equal(head(x, (8, 8)), head(x, (8, 8)))


def test_head_rejects_non_positive_target():
    with pytest.raises(ValueError):
        SegmentationHead(8, 2)(torch.randn(1, 8, 4, 4), (0, 4))


def test_bn_stats_update_only_in_training():
    dec = FPNDecoder((8, 8, 8, 8), DecoderConfig(feature_dim=8, refine_depth=0))
    feats = _pyramid((8, 8, 8, 8), 64, 64, batch=2)
    bn = dec.smooth[0][1]
    before = bn.running_mean.clone()
    dec.eval()
    with torch.no_grad():
        dec(feats)
    assert torch.equal(bn.running_mean, before)
    dec.train()
    with torch.no_grad():
        dec(feats)
    assert not torch.equal(bn.running_mean, before)
