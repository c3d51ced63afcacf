"""Segmentation evaluation: pixel confusion counts, region metrics,
boundary F1, and per-image / dataset aggregation.

Degenerate denominators resolve by vacuous truth: a metric whose denominator
is empty scores 1.0 when the prediction is also perfect on that quantity
(e.g. no ground-truth foreground and none predicted) and 0.0 otherwise, so
empty-mask edge cases stay deterministic.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "confusion_counts",
    "region_metrics",
    "boundary_mask",
    "boundary_f1",
    "default_boundary_tolerance",
    "evaluate_pair",
    "aggregate",
]

METRIC_NAMES = (
    "accuracy",
    "sensitivity",
    "specificity",
    "jaccard",
    "dice_region",
    "boundary_f1",
)


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel-level confusion: foreground = 1 is the positive class."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_binary_pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(
            f"mask dimensions differ: prediction {pred.shape} vs ground truth {gt.shape}"
        )
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask must be strictly binary")
    return pred.astype(bool), gt.astype(bool)


def confusion_counts(pred, gt) -> ConfusionCounts:
    """Tally tp / fp / fn / tn over a prediction vs ground-truth mask pair."""
    pred, gt = _check_binary_pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def region_metrics(c: ConfusionCounts) -> dict[str, float]:
    """Accuracy, sensitivity, specificity, Jaccard and region Dice.

        accuracy    = (tp + tn) / total
        sensitivity = tp / (tp + fn)
        specificity = tn / (tn + fp)
        jaccard     = tp / (tp + fp + fn)
        dice_region = 2 tp / (2 tp + fp + fn)
    """
    if c.total <= 0:
        raise ValueError("confusion counts are empty (total = 0)")
    accuracy = (c.tp + c.tn) / c.total
    if c.tp + c.fn > 0:
        sensitivity = c.tp / (c.tp + c.fn)
    else:
        sensitivity = 1.0 if c.fp == 0 else 0.0
    if c.tn + c.fp > 0:
        specificity = c.tn / (c.tn + c.fp)
    else:
        specificity = 1.0 if c.fn == 0 else 0.0
    if c.tp + c.fp + c.fn > 0:
        jaccard = c.tp / (c.tp + c.fp + c.fn)
        dice = 2 * c.tp / (2 * c.tp + c.fp + c.fn)
    else:
        jaccard = 1.0
        dice = 1.0
    return {
        "accuracy": accuracy,
        "sensitivity": sensitivity,
        "specificity": specificity,
        "jaccard": jaccard,
        "dice_region": dice,
    }


def boundary_mask(mask) -> np.ndarray:
    """Foreground pixels with a background 8-neighbour or on the image edge."""
    mask = np.asarray(mask).astype(bool)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    padded = np.pad(mask, 1, constant_values=False)
    all_neighbours_fg = np.ones_like(mask)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            h, w = mask.shape
            all_neighbours_fg &= padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
    return mask & ~all_neighbours_fg


def default_boundary_tolerance(h: int, w: int) -> int:
    """0.75% of the image diagonal, rounded to the nearest pixel."""
    return int(round(0.0075 * math.hypot(h, w)))


def boundary_f1(pred, gt, tolerance) -> float:
    """F1 over boundary-pixel matches within a Euclidean distance tolerance.

    Precision is the fraction of predicted boundary pixels within
    ``tolerance`` of some ground-truth boundary pixel; recall is symmetric.
    Both boundaries empty scores 1.0; score is 0.0 when P + R = 0.
    """
    pred, gt = _check_binary_pair(pred, gt)
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    bp = boundary_mask(pred)
    bg = boundary_mask(gt)
    np_pred = int(bp.sum())
    np_gt = int(bg.sum())
    if np_pred == 0 and np_gt == 0:
        return 1.0
    if np_pred == 0 or np_gt == 0:
        return 0.0
    # distance_transform_edt measures to the nearest zero, so invert
    dist_to_gt = ndimage.distance_transform_edt(~bg)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    precision = float(np.count_nonzero(dist_to_gt[bp] <= tolerance)) / np_pred
    recall = float(np.count_nonzero(dist_to_pred[bg] <= tolerance)) / np_gt
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate_pair(pred, gt, tolerance=None, sample_id=None) -> dict:
    """All six metrics for one prediction / ground-truth pair."""
    pred = np.asarray(pred)
    if tolerance is None:
        tolerance = default_boundary_tolerance(*pred.shape)
    record = {"id": sample_id}
    record.update(region_metrics(confusion_counts(pred, gt)))
    record["boundary_f1"] = boundary_f1(pred, gt, tolerance)
    return record


@dataclass(frozen=True)
class MetricsReport:
    """Per-image metric records plus their dataset arithmetic means."""

    per_image: list
    mean: dict
    tolerance_px: float

    def to_dict(self) -> dict:
        return {
            "per_image": self.per_image,
            "mean": self.mean,
            "tolerance_px": self.tolerance_px,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def aggregate(records, tolerance_px) -> MetricsReport:
    """Arithmetic mean of each metric across per-image records."""
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty set of records")
    mean = {}
    for name in METRIC_NAMES:
        mean[name] = float(np.mean([rec[name] for rec in records]))
    return MetricsReport(per_image=records, mean=mean, tolerance_px=tolerance_px)
