"""Moving-object IoU and distance-binned evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch
from .kitti_io import MOVING, UNLABELED

__all__ = [
    "ConfusionCounts",
    "DistanceBinnedReport",
    "DISTANCE_BINS",
    "confusion",
    "iou_mos",
    "distance_binned_eval",
    "nanmean_excluding_undefined",
]

# left-closed range bins in meters
DISTANCE_BINS = (("close", 0.0, 20.0), ("medium", 20.0, 50.0), ("far", 50.0, math.inf))


def _ratio(num, den) -> float:
    return num / den if den else math.nan


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def iou(self) -> float:
        """TP / (TP + FP + FN); NaN when the union is empty."""
        return _ratio(self.tp, self.tp + self.fp + self.fn)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)


def _check(pred, gt, mask=None):
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise LengthMismatch(f"{len(pred)} predictions for {len(gt)} labels")
    if mask is None:
        mask = np.ones(len(gt), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).ravel()
        if mask.shape != gt.shape:
            raise LengthMismatch("evaluation mask length differs from labels")
    return pred, gt, mask & (gt != UNLABELED)


def confusion(pred, gt, eval_mask=None, moving: int = MOVING) -> ConfusionCounts:
    """Counts for the moving class; unlabeled ground truth is skipped."""
    pred, gt, mask = _check(pred, gt, eval_mask)
    p = (pred == moving) & mask
    g = (gt == moving) & mask
    return ConfusionCounts(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g)))


def iou_mos(pred, gt, eval_mask=None) -> float:
    """Moving-class IoU over the masked points; NaN when undefined."""
    return confusion(pred, gt, eval_mask).iou


def nanmean_excluding_undefined(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class DistanceBinnedReport:
    bins: dict = field(default_factory=lambda: {name: ConfusionCounts() for name, _, _ in DISTANCE_BINS})

    def __add__(self, other: "DistanceBinnedReport") -> "DistanceBinnedReport":
        return DistanceBinnedReport({k: self.bins[k] + other.bins[k] for k in self.bins})

    @property
    def overall(self) -> ConfusionCounts:
        total = ConfusionCounts()
        for c in self.bins.values():
            total = total + c
        return total

    def rows(self):
        """(bin, tp, fp, fn, iou, recall, precision) rows, overall last."""
        out = []
        for name, c in list(self.bins.items()) + [("all", self.overall)]:
            out.append((name, c.tp, c.fp, c.fn, c.iou, c.recall, c.precision))
        return out

    def to_csv(self) -> str:
        lines = ["bin,tp,fp,fn,iou,recall,precision"]
        for name, tp, fp, fn, iou, rec, prec in self.rows():
            lines.append(f"{name},{tp},{fp},{fn},{iou:.6f},{rec:.6f},{prec:.6f}")
        return "\n".join(lines) + "\n"


def distance_binned_eval(pred, gt, coords, eval_mask=None) -> DistanceBinnedReport:
    """Confusion per range bin; range is the Euclidean norm in the current-scan frame."""
    pred, gt, mask = _check(pred, gt, eval_mask)
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if len(coords) != len(gt):
        raise LengthMismatch("one coordinate per point is required")
    rng = np.linalg.norm(coords, axis=1)
    report = DistanceBinnedReport()
    for name, lo, hi in DISTANCE_BINS:
        in_bin = (rng >= lo) & (rng < hi)
        report.bins[name] = confusion(pred, gt, in_bin & mask)
    return report
