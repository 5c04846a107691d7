import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fcbnet.metrics import ConfusionMatrix, accumulate, iou_scores


def _brute_iou(pred, target, k):
    out = []
    for c in range(k):
        p, t = pred == c, target == c
        union = np.logical_or(p, t).sum()
        out.append(1.0 if union == 0 else np.logical_and(p, t).sum() / union)
    return out


def test_diagonal_accumulation():
    labels = np.array([0] * 60 + [1] * 40).reshape(10, 10)
    cm = accumulate(ConfusionMatrix(2), labels, labels)
    np.testing.assert_array_equal(cm.counts, [[60, 0], [0, 40]])
    assert cm.total == 100
    res = iou_scores(cm)
    assert res.per_class == [1.0, 1.0] and res.miou == 1.0


def test_empty_accumulation_is_noop():
    cm = ConfusionMatrix(3).accumulate(np.zeros((0,), int), np.zeros((0,), int))
    assert cm.total == 0


def test_hand_worked_case():
    pred = np.array([[0, 1], [1, 1]])
    target = np.array([[0, 0], [1, 0]])
    res = ConfusionMatrix(2).accumulate(pred, target).iou_scores()
    # class 0: tp 1, union 3; class 1: tp 1, union 3
    assert res.per_class == pytest.approx([1 / 3, 1 / 3])
    pred3 = np.array([0, 0, 2, 2])
    tgt3 = np.array([0, 1, 1, 2])
    res3 = ConfusionMatrix(3).accumulate(pred3, tgt3).iou_scores()
    assert res3.per_class == pytest.approx([0.5, 0.0, 0.5])
    assert res3.miou == pytest.approx(1 / 3)


def test_absent_class_scores_one_with_warning():
    with pytest.warns(UserWarning, match="absent"):
        res = ConfusionMatrix(3).accumulate(np.array([0, 1]), np.array([0, 1])).iou_scores()
    assert res.per_class == [1.0, 1.0, 1.0] and res.absent == [2]
    assert res.to_dict(["bg", "weed", "crop"])["absent_classes"] == ["crop"]


def test_errors():
    cm = ConfusionMatrix(2)
    with pytest.raises(ValueError, match="shape"):
        cm.accumulate(np.zeros(3, int), np.zeros(4, int))
    with pytest.raises(ValueError, match="range"):
        cm.accumulate(np.array([2]), np.array([0]))
    with pytest.raises(ValueError, match="range"):
        cm.accumulate(np.array([0]), np.array([-1]))
    with pytest.raises(ValueError):
        cm.merge(ConfusionMatrix(3))


_labels = st.integers(2, 5).flatmap(
    lambda k: st.tuples(
        st.just(k),
        hnp.arrays(np.int64, (6, 7), elements=st.integers(0, k - 1)),
        hnp.arrays(np.int64, (6, 7), elements=st.integers(0, k - 1)),
    )
)


@settings(max_examples=60)
@given(_labels)
def test_matches_brute_force(args):
    k, pred, target = args
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = ConfusionMatrix(k).accumulate(pred, target).iou_scores()
    np.testing.assert_allclose(res.per_class, _brute_iou(pred, target, k), rtol=0, atol=1e-12)
    assert 0.0 <= res.miou <= 1.0


@settings(max_examples=40)
@given(_labels, st.integers(1, 41))
def test_accumulation_is_additive(args, cut):
    k, pred, target = args
    p, t = pred.ravel(), target.ravel()
    whole = ConfusionMatrix(k).accumulate(p, t)
    parts = ConfusionMatrix(k).accumulate(p[:cut], t[:cut]) + ConfusionMatrix(k).accumulate(p[cut:], t[cut:])
    np.testing.assert_array_equal(whole.counts, parts.counts)
    assert whole.total == p.size


@settings(max_examples=40)
@given(_labels, st.randoms(use_true_random=False))
def test_pixel_permutation_invariance(args, rnd):
    k, pred, target = args
    order = list(range(pred.size))
    rnd.shuffle(order)
    a = ConfusionMatrix(k).accumulate(pred, target)
    b = ConfusionMatrix(k).accumulate(pred.ravel()[order], target.ravel()[order])
    np.testing.assert_array_equal(a.counts, b.counts)
