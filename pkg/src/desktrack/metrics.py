"""Overlap metrics: AO (mean IoU) and success rates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .losses import iou_np
from .tokens import BoundingBox


@dataclass(frozen=True)
class Metrics:
    ao: float
    sr50: float
    sr75: float
    mean_iou: float
    frames: int


def _arr(boxes) -> np.ndarray:
    return np.array([b.as_array() if isinstance(b, BoundingBox) else np.asarray(b, dtype=float) for b in boxes])


def per_frame_iou(pred: Sequence, gt: Sequence) -> np.ndarray:
    if len(pred) != len(gt):
        raise ValueError(f"sequence length mismatch: {len(pred)} predictions vs {len(gt)} ground-truth boxes")
    if not len(pred):
        return np.zeros(0)
    return iou_np(_arr(pred), _arr(gt))


def success_rate(ious: np.ndarray, threshold: float) -> float:
    return float(np.mean(ious >= threshold)) if len(ious) else 0.0


def evaluate(pred: Sequence, gt: Sequence) -> Metrics:
    ious = per_frame_iou(pred, gt)
    ao = float(ious.mean()) if len(ious) else 0.0
    return Metrics(ao, success_rate(ious, 0.5), success_rate(ious, 0.75), ao, len(ious))
