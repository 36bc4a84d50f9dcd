"""Localization and segmentation scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError
from .geometry import overlap_ratio


@dataclass(frozen=True)
class LocalizationReport:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self):
        return 1.0 if self.tp + self.fp == 0 else self.tp / (self.tp + self.fp)

    @property
    def recall(self):
        return 1.0 if self.tp + self.fn == 0 else self.tp / (self.tp + self.fn)

    @property
    def f_score(self):
        p, r = self.precision, self.recall
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    def __add__(self, other):
        return LocalizationReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def text(self):
        return "\n".join([
            f"{'tp':<10}{self.tp:>10d}",
            f"{'fp':<10}{self.fp:>10d}",
            f"{'fn':<10}{self.fn:>10d}",
            f"{'precision':<10}{self.precision:>10.4f}",
            f"{'recall':<10}{self.recall:>10.4f}",
            f"{'f_score':<10}{self.f_score:>10.4f}",
        ])

    def machine(self):
        return f"{self.precision!r},{self.recall!r},{self.f_score!r}"


@dataclass(frozen=True)
class SegReport:
    dice: float
    hausdorff: float

    def text(self):
        return f"{'dice':<10}{self.dice:>10.4f}\n{'hausdorff':<10}{self.hausdorff:>10.4f}"

    def machine(self):
        return f"{self.dice!r},{self.hausdorff!r}"


def localization_metrics(preds, gt_boxes, overlap_threshold=0.5):
    """Score per-frame predictions (box or None) against ground-truth boxes.

    A prediction covering at least ``overlap_threshold`` of the smaller box is
    a true positive. A prediction below that is a false positive and the
    nerve counts as missed. No prediction is a miss.
    """
    preds, gt_boxes = list(preds), list(gt_boxes)
    if len(preds) != len(gt_boxes):
        raise InvalidInputError(f"{len(preds)} predictions for {len(gt_boxes)} frames")
    tp = fp = fn = 0
    for pred, gt in zip(preds, gt_boxes):
        if pred is None:
            fn += 1
        elif overlap_ratio(pred, gt) >= overlap_threshold:
            tp += 1
        else:
            fp += 1
            fn += 1
    return LocalizationReport(tp, fp, fn)


def _check_pair(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b):
    """2|A & B| / (|A| + |B|); two empty masks score 1."""
    a, b = _check_pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask):
    """Set pixels with a 4-neighbour that is unset or outside the image."""
    mask = np.asarray(mask, dtype=bool)
    p = np.pad(mask, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


def _directed_sq(src, dst):
    """max over src pixels of the squared distance to the nearest dst pixel."""
    _, (ri, ci) = ndimage.distance_transform_edt(~dst, return_indices=True)
    rows, cols = np.nonzero(src)
    dr = rows - ri[rows, cols]
    dc = cols - ci[rows, cols]
    return int(np.max(dr * dr + dc * dc))


def hausdorff(a, b):
    """Symmetric Hausdorff distance between mask boundaries, in pixels."""
    a, b = _check_pair(a, b)
    if not a.any() or not b.any():
        raise InvalidInputError("Hausdorff distance is undefined for an empty mask")
    ba, bb = boundary(a), boundary(b)
    return float(np.sqrt(max(_directed_sq(ba, bb), _directed_sq(bb, ba))))


def segmentation_metrics(pred, gt):
    return SegReport(dice(pred, gt), hausdorff(pred, gt))
