"""Confusion-matrix accumulation and per-class pixel accuracy / IoU."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassTaxonomy, ShapeError


@dataclass
class ConfusionMatrix:
    """C x C pixel counts; entry (i, j) = pixels of true class i predicted as j."""

    counts: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    """Tally one prediction/truth pair into ``cm`` and return it."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} and truth {truth.shape} must match")
    n = cm.num_classes
    if truth.size:
        if truth.min() < 0 or truth.max() >= n:
            raise ValueError(f"truth contains class ids outside 0..{n - 1}")
        if pred.min() < 0 or pred.max() >= n:
            raise ValueError(f"pred contains class ids outside 0..{n - 1}")
        flat = n * truth.astype(np.int64).ravel() + pred.astype(np.int64).ravel()
        cm.counts += np.bincount(flat, minlength=n * n).reshape(n, n)
    return cm


@dataclass
class MetricsReport:
    """Per-class pixel accuracy and IoU; NaN marks classes with no support.

    Means are taken over the non-background classes only, skipping NaN
    entries, mirroring how the reference tables average the 8 named classes.
    """

    cpa: np.ndarray
    iou: np.ndarray
    support: np.ndarray
    mean_cpa: float
    mean_iou: float


def compute_metrics(cm: ConfusionMatrix, taxonomy: ClassTaxonomy) -> MetricsReport:
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    truth_totals = counts.sum(axis=1)
    pred_totals = counts.sum(axis=0)
    union = truth_totals + pred_totals - diag

    with np.errstate(invalid="ignore", divide="ignore"):
        cpa = np.where(truth_totals > 0, diag / np.maximum(truth_totals, 1), np.nan)
        iou = np.where(union > 0, diag / np.maximum(union, 1), np.nan)

    fg = list(taxonomy.foreground_ids())
    mean_cpa = float(np.nanmean(cpa[fg])) if np.isfinite(cpa[fg]).any() else float("nan")
    mean_iou = float(np.nanmean(iou[fg])) if np.isfinite(iou[fg]).any() else float("nan")
    return MetricsReport(
        cpa=cpa,
        iou=iou,
        support=cm.counts.sum(axis=1),
        mean_cpa=mean_cpa,
        mean_iou=mean_iou,
    )
