"""Segmentation metrics and the per-epoch metrics record."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import CLASS_NAMES


def _check(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"label map shapes differ: {pred.shape} vs {truth.shape}")


def pixel_accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    """Percentage of pixels whose predicted label matches the truth."""
    _check(pred, truth)
    return 100.0 * float((pred == truth).sum()) / truth.size


def iou_per_class(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Intersection over union per class; a class absent from both maps scores 0."""
    _check(pred, truth)
    out = np.zeros(num_classes)
    for c in range(num_classes):
        p, t = pred == c, truth == c
        union = np.logical_or(p, t).sum()
        if union:
            out[c] = np.logical_and(p, t).sum() / union
    return out


@dataclass
class MetricsRow:
    global_epoch: int
    client_id: object  # int, or "global"
    strategy: str
    sigma_noise: float
    train_loss: float = math.nan
    val_loss: float = math.nan
    r_weight: float = math.nan
    indicator: float = math.nan
    best_local_epoch: int = 0
    test_loss: float = math.nan
    test_accuracy_percent: float = math.nan
    iou: list = field(default_factory=lambda: [math.nan] * len(CLASS_NAMES))
    diverged: bool = False
