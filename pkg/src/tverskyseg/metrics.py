"""Confusion counts and overlap metrics for binary segmentations.

Ratios whose denominator is empty are vacuous and score 1.0; this makes a
correct "nothing here" prediction perfect and keeps every metric in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

METRIC_NAMES = ("dsc", "f2", "sens", "spec", "prec")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


def binarize(p) -> np.ndarray:
    """Foreground mask of a (N, 2, ...) probability field: p0 >= 0.5, ties to foreground."""
    p = np.asarray(p)
    if p.ndim < 2 or p.shape[1] != 2:
        raise ValueError(f"expected a (N, 2, ...) probability field, got {p.shape}")
    return (p[:, 0] >= 0.5).astype(np.uint8)


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred).astype(bool)
    truth = np.asarray(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    return ConfusionCounts(tp, truth.size - tp - fp - fn, fp, fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def metrics_from_confusion(c: ConfusionCounts) -> dict[str, float]:
    return {
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "f2": _ratio(5 * c.tp, 5 * c.tp + 4 * c.fn + c.fp),
        "sens": _ratio(c.tp, c.tp + c.fn),
        "spec": _ratio(c.tn, c.tn + c.fp),
        "prec": _ratio(c.tp, c.tp + c.fp),
    }


def aggregate(per_volume: list[ConfusionCounts]) -> dict[str, dict[str, float]]:
    """Per-volume mean and voxel-pooled metrics over a set of volumes."""
    if not per_volume:
        raise ValueError("no volumes to aggregate")
    rows = [metrics_from_confusion(c) for c in per_volume]
    mean = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
    pooled_counts = ConfusionCounts()
    for c in per_volume:
        pooled_counts = pooled_counts + c
    return {"mean": mean, "pooled": metrics_from_confusion(pooled_counts)}
