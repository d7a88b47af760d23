"""Segmentation metrics over binary masks and voxel grids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SegMetrics", "iou", "pixel_accuracy"]


@dataclass
class SegMetrics:
    iou: float
    accuracy: float
    per_view: list = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.iou <= 1.0 and 0.0 <= self.accuracy <= 1.0):
            raise ValueError("metrics must lie in [0, 1]")


def _as_bool(a, name):
    arr = np.asarray(a)
    if arr.dtype != bool:
        arr = arr.astype(bool)
    return arr


def iou(pred, gt) -> float:
    """Intersection over union; defined as 1.0 when both sets are empty."""
    p = _as_bool(pred, "pred")
    g = _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def pixel_accuracy(pred, gt) -> float:
    p = _as_bool(pred, "pred")
    g = _as_bool(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.size == 0:
        return 1.0
    return float((p == g).mean())
