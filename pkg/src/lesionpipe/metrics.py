"""Pixel-level segmentation metrics and k-fold splitting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class MetricsReport:
    """Confusion counts and the five challenge metrics for one mask pair.

    Ratios with a zero denominator are vacuously satisfied and reported as
    1.0; their names are listed in ``vacuous``.
    """

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    dice: float
    jaccard: float
    sensitivity: float
    specificity: float
    vacuous: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "AC": self.accuracy,
            "DC": self.dice,
            "JI": self.jaccard,
            "SE": self.sensitivity,
            "SP": self.specificity,
            "TP": self.tp,
            "FP": self.fp,
            "TN": self.tn,
            "FN": self.fn,
            "vacuous": list(self.vacuous),
        }


METRIC_KEYS = ("AC", "DC", "JI", "SE", "SP")


def compute_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray) -> MetricsReport:
    """Confusion counts over pixels with lesion as the positive class."""
    pred = np.asarray(pred_mask) != 0
    gt = np.asarray(gt_mask) != 0
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    total = tp + fp + tn + fn

    vacuous: list[str] = []

    def ratio(name: str, num: int, den: int) -> float:
        if den == 0:
            vacuous.append(name)
            return 1.0
        return num / den

    return MetricsReport(
        tp=tp, fp=fp, tn=tn, fn=fn,
        accuracy=(tp + tn) / total,
        dice=ratio("DC", 2 * tp, 2 * tp + fp + fn),
        jaccard=ratio("JI", tp, tp + fp + fn),
        sensitivity=ratio("SE", tp, tp + fn),
        specificity=ratio("SP", tn, tn + fp),
        vacuous=tuple(vacuous),
    )


def aggregate_metrics(reports: Sequence[MetricsReport]) -> dict:
    """Mean and (population) standard deviation of each metric."""
    if not reports:
        raise ValueError("aggregate_metrics: no reports")
    table = {
        "AC": [r.accuracy for r in reports],
        "DC": [r.dice for r in reports],
        "JI": [r.jaccard for r in reports],
        "SE": [r.sensitivity for r in reports],
        "SP": [r.specificity for r in reports],
    }
    return {
        "n": len(reports),
        "mean": {k: float(np.mean(v)) for k, v in table.items()},
        "std": {k: float(np.std(v)) for k, v in table.items()},
    }


def kfold_split(n: int, k: int, seed: int) -> list[list[int]]:
    """Seeded shuffle then contiguous chunking into k folds whose sizes
    differ by at most one; the folds partition range(n)."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    base, extra = divmod(n, k)
    folds: list[list[int]] = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append([int(j) for j in order[start:start + size]])
        start += size
    return folds
