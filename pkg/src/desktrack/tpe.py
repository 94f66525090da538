"""Target probability estimation: template descriptors, per-token scores, 3x3 aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_last_dim,
    expand_rows,
    gelu,
    matmul,
    max_over_rows,
    sigmoid,
    softplus,
    take_rows,
)
from .tokens import ZD, ZI, X, BoundingBox, TokenGrid, cells_in_box, grid_coords, select_bbox_tokens


@dataclass
class TargetDescriptors:
    t_i: Tensor  # [B, D]
    t_d: Tensor  # [B, D]
    fell_back: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=bool))


@dataclass
class TargetProbabilityMap:
    p: np.ndarray  # [B, N_x_live] aligned with the grid's X rows
    p_map: np.ndarray  # [B, G, G]
    s_map: np.ndarray | None = None
    center: np.ndarray | None = None  # [B, 2] (row, col)
    logits: Tensor | None = None  # [B, N_x_live], differentiable


def compute_descriptors(
    grid: TokenGrid, boxes_zi: Sequence[BoundingBox], boxes_zd: Sequence[BoundingBox]
) -> TargetDescriptors:
    """Column-wise max over the template tokens whose cell centres fall inside each box."""
    masks = []
    fell = np.zeros((grid.batch, 2), dtype=bool)
    for j, (group, boxes) in enumerate(((ZI, boxes_zi), (ZD, boxes_zd))):
        rows = grid.rows_of(group)
        m = np.zeros((grid.batch, len(rows)), dtype=bool)
        for b in range(grid.batch):
            sel, fell[b, j] = select_bbox_tokens(grid, group, boxes[b], sample=b)
            m[b, np.searchsorted(rows, sel)] = True
        masks.append((rows, m))
    descs = []
    for rows, m in masks:
        feats = take_rows(grid.tokens, np.tile(rows, (grid.batch, 1)))
        descs.append(max_over_rows(feats, mask=m))
    return TargetDescriptors(descs[0], descs[1], fell)


def score_tokens(params: dict[str, Tensor], desc: TargetDescriptors, grid: TokenGrid) -> TargetProbabilityMap:
    """p_i = sigmoid(MLP([T_I; T_D; E_xi])) for every live search token."""
    xs = grid.rows_of(X)
    n = len(xs)
    feats = take_rows(grid.tokens, np.tile(xs, (grid.batch, 1)))
    joint = concat_last_dim([expand_rows(desc.t_i, n), expand_rows(desc.t_d, n), feats])
    hidden = gelu(add(matmul(joint, params["tpe.w1"]), params["tpe.b1"]))
    logits = add(matmul(hidden, params["tpe.w2"]), params["tpe.b2"]).reshape(grid.batch, n)
    p = sigmoid(logits).data
    return TargetProbabilityMap(p=p, p_map=probability_map(grid, p), logits=logits)


def probability_map(grid: TokenGrid, p: np.ndarray) -> np.ndarray:
    """Scatter per-row probabilities onto the G x G grid; dead cells read 0."""
    g = grid.grid_side
    xs = grid.rows_of(X)
    out = np.zeros((grid.batch, g, g))
    for b in range(grid.batch):
        rc = grid.coord[b, xs]
        out[b, rc[:, 0], rc[:, 1]] = p[b]
    return out


def box_sum3(p_map: np.ndarray) -> np.ndarray:
    """Sum over each cell's 3x3 neighbourhood with zero padding (last two axes)."""
    padded = np.pad(p_map, [(0, 0)] * (p_map.ndim - 2) + [(1, 1), (1, 1)])
    h, w = p_map.shape[-2:]
    out = np.zeros_like(p_map, dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            out = out + padded[..., di : di + h, dj : dj + w]
    return out


def first_argmax_2d(a: np.ndarray) -> np.ndarray:
    """Row-major-first argmax over the last two axes -> [..., 2] (row, col)."""
    flat = a.reshape(a.shape[:-2] + (-1,))
    idx = np.argmax(flat, axis=-1)
    return np.stack(np.divmod(idx, a.shape[-1]), axis=-1)


def aggregate(pmap: TargetProbabilityMap) -> TargetProbabilityMap:
    pmap.s_map = box_sum3(pmap.p_map)
    pmap.center = first_argmax_2d(pmap.s_map)
    return pmap


def token_labels(grid: TokenGrid, gt_boxes: Sequence[BoundingBox]) -> np.ndarray:
    """1 where a live search token's cell centre lies inside the ground-truth box."""
    xs = grid.rows_of(X)
    g = grid.grid_side
    labels = np.zeros((grid.batch, len(xs)))
    for b in range(grid.batch):
        cells, _ = cells_in_box(g, gt_boxes[b])
        rc = grid.coord[b, xs]
        labels[b] = np.isin(rc[:, 0] * g + rc[:, 1], cells)
    return labels


def tpe_loss(pmap: TargetProbabilityMap, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of the token scores against in-box labels."""
    z = pmap.logits
    y = Tensor(labels)
    # BCE(sigmoid(z), y) = softplus(z) - y z
    return (softplus(z) - z * y).mean()


__all__ = [
    "TargetDescriptors",
    "TargetProbabilityMap",
    "aggregate",
    "box_sum3",
    "compute_descriptors",
    "first_argmax_2d",
    "grid_coords",
    "probability_map",
    "score_tokens",
    "token_labels",
    "tpe_loss",
]
