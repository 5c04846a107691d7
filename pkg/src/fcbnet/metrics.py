"""Confusion-matrix accumulation and IoU scores."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class IoUResult:
    per_class: list[float]
    miou: float
    # classes with no pixels in either prediction or target
    absent: list[int]

    def to_dict(self, class_names: list[str] | None = None) -> dict:
        names = class_names or [str(i) for i in range(len(self.per_class))]
        return {
            "iou": dict(zip(names, self.per_class)),
            "miou": self.miou,
            "absent_classes": [names[i] for i in self.absent],
        }


class ConfusionMatrix:
    """Pixel counts ``counts[target, pred]`` for a fixed number of classes."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def accumulate(self, pred, target) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        target = np.asarray(target)
        if pred.shape != target.shape:
            raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
        p = pred.astype(np.int64).ravel()
        t = target.astype(np.int64).ravel()
        for name, a in (("prediction", p), ("target", t)):
            if a.size and (a.min() < 0 or a.max() >= self.num_classes):
                raise ValueError(f"{name} label out of range [0, {self.num_classes})")
        n = self.num_classes
        self.counts += np.bincount(t * n + p, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou_scores(self) -> IoUResult:
        return iou_scores(self)


def accumulate(cm: ConfusionMatrix, pred, target) -> ConfusionMatrix:
    return cm.accumulate(pred, target)


def iou_scores(cm: ConfusionMatrix) -> IoUResult:
    """Per-class IoU and their unweighted mean.

    A class absent from both prediction and target scores 1.0 and is listed in
    ``absent`` (a warning is emitted).
    """
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    denom = c.sum(axis=0) + c.sum(axis=1) - tp
    absent = [int(i) for i in np.flatnonzero(denom == 0)]
    if absent:
        warnings.warn(f"classes {absent} absent from prediction and target; IoU set to 1.0", stacklevel=2)
    iou = np.where(denom > 0, tp / np.where(denom > 0, denom, 1.0), 1.0)
    return IoUResult([float(v) for v in iou], float(iou.mean()), absent)
