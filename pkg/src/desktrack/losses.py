"""Training losses: penalty-reduced focal loss, GIoU, L1 and token BCE."""

from __future__ import annotations

import warnings

import numpy as np

from .autodiff import Tensor, add, maximum, minimum, power, sigmoid, softplus, tabs, take_rows
from .tokens import BoundingBox


def gaussian_heatmap(side: int, box: BoundingBox, sigma: float = 1.0) -> np.ndarray:
    """Unit-peak Gaussian on a side x side grid, centred on the cell holding the box centre."""
    u, v = center_cell(side, box)
    r, c = np.mgrid[0:side, 0:side]
    return np.exp(-((r - u) ** 2 + (c - v) ** 2) / (2.0 * sigma**2))


def center_cell(side: int, box: BoundingBox) -> tuple[int, int]:
    u = int(np.clip(np.floor(box.cy * side), 0, side - 1))
    v = int(np.clip(np.floor(box.cx * side), 0, side - 1))
    return u, v


def focal_loss(logits: Tensor, heatmap: np.ndarray, valid: np.ndarray | None = None, alpha=2.0, beta=4.0) -> Tensor:
    """CornerNet-style focal loss on per-cell logits ([B, C]) against a [B, C] heatmap.

    Cells equal to 1 are positives. The sum over valid cells is divided by
    the number of valid positives per sample (at least 1), then averaged over
    the batch.
    """
    y = np.asarray(heatmap, dtype=np.float64)
    valid = np.ones_like(y, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    pos = (y == 1.0) & valid
    neg = (y < 1.0) & valid
    p = sigmoid(logits)
    log_p = -softplus(-logits)
    log_1mp = -softplus(logits)
    pos_term = power(1.0 - p, alpha) * log_p * pos
    neg_term = power(p, alpha) * log_1mp * (np.power(1.0 - y, beta) * neg)
    per_sample = -(pos_term + neg_term).sum(axis=-1)
    norm = np.maximum(pos.sum(axis=-1), 1).astype(np.float64)
    return (per_sample / norm).mean()


def focal_loss_reference(prob: np.ndarray, heatmap: np.ndarray, alpha=2.0, beta=4.0) -> float:
    """Direct per-cell evaluation on probabilities; used to cross-check :func:`focal_loss`."""
    total, npos = 0.0, 0
    for p, y in zip(np.ravel(prob), np.ravel(heatmap)):
        if y == 1.0:
            total -= (1 - p) ** alpha * np.log(p)
            npos += 1
        else:
            total -= (1 - y) ** beta * p**alpha * np.log(1 - p)
    return total / max(npos, 1)


def giou_terms(pred: tuple[Tensor, Tensor, Tensor, Tensor], gt: np.ndarray) -> Tensor:
    """Generalised IoU between predicted (cx, cy, w, h) tensors and gt boxes [..., 4]."""
    cx, cy, w, h = pred
    g = np.asarray(gt, dtype=np.float64)
    gx0, gy0 = g[..., 0] - g[..., 2] / 2, g[..., 1] - g[..., 3] / 2
    gx1, gy1 = g[..., 0] + g[..., 2] / 2, g[..., 1] + g[..., 3] / 2
    x0, x1 = cx - w * 0.5, cx + w * 0.5
    y0, y1 = cy - h * 0.5, cy + h * 0.5
    iw = maximum(minimum(x1, gx1) - maximum(x0, gx0), 0.0)
    ih = maximum(minimum(y1, gy1) - maximum(y0, gy0), 0.0)
    inter = iw * ih
    union = w * h + g[..., 2] * g[..., 3] - inter
    iou = inter / union
    cw = maximum(x1, gx1) - minimum(x0, gx0)
    ch = maximum(y1, gy1) - minimum(y0, gy0)
    hull = cw * ch
    return iou - (hull - union) / hull


def giou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain-array GIoU for (cx, cy, w, h) boxes."""
    return giou_terms(tuple(Tensor(np.asarray(a, dtype=np.float64)[..., i]) for i in range(4)), b).data


def iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU for (cx, cy, w, h) boxes along the last axis."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ax0, ax1 = a[..., 0] - a[..., 2] / 2, a[..., 0] + a[..., 2] / 2
    ay0, ay1 = a[..., 1] - a[..., 3] / 2, a[..., 1] + a[..., 3] / 2
    bx0, bx1 = b[..., 0] - b[..., 2] / 2, b[..., 0] + b[..., 2] / 2
    by0, by1 = b[..., 1] - b[..., 3] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
    ih = np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def clamp_gt(box: BoundingBox, side: int) -> BoundingBox:
    """Degenerate boxes are widened to one grid cell."""
    cell = 1.0 / side
    if box.w <= 0 or box.h <= 0:
        warnings.warn("degenerate ground-truth box clamped to one patch cell", RuntimeWarning, stacklevel=2)
        return BoundingBox(box.cx, box.cy, max(box.w, cell), max(box.h, cell))
    return box


def regression_losses(offset: Tensor, size: Tensor, gt_boxes: list[BoundingBox], side: int):
    """GIoU and L1 terms at each sample's gt-centre cell.

    ``offset`` and ``size`` are [B, G*G, 2]. Returns (giou_loss, l1_loss), both
    averaged over the batch.
    """
    b = len(gt_boxes)
    cells = np.zeros((b, 1), dtype=np.int64)
    base = np.zeros((b, 2))
    targets = np.zeros((b, 4))
    gts = np.zeros((b, 4))
    for i, box in enumerate(gt_boxes):
        u, v = center_cell(side, box)
        cells[i, 0] = u * side + v
        base[i] = (v, u)
        targets[i] = (box.cx * side - v, box.cy * side - u, box.w, box.h)
        gts[i] = box.as_array()
    off = take_rows(offset, cells).reshape(b, 2)
    siz = take_rows(size, cells).reshape(b, 2)
    cx = (add(off[:, 0], base[:, 0])) * (1.0 / side)
    cy = (add(off[:, 1], base[:, 1])) * (1.0 / side)
    giou = giou_terms((cx, cy, siz[:, 0], siz[:, 1]), gts)
    giou_loss = (1.0 - giou).mean()
    pred = [off[:, 0], off[:, 1], siz[:, 0], siz[:, 1]]
    l1 = sum(tabs(pv - targets[:, j]) for j, pv in enumerate(pred)) * 0.25
    return giou_loss, l1.mean()


def bce_reference(p: np.ndarray, y: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
