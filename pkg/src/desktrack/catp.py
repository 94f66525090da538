"""Context-aware token pruning around the aggregate-probability peak."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import take_rows
from .config import ModelConfig
from .tokens import X, TokenGrid
from .tpe import TargetProbabilityMap


class PruningError(RuntimeError):
    """Pruning applied out of order or to an inconsistent grid."""


@dataclass(frozen=True)
class PruneDecision:
    cz_cells: frozenset[tuple[int, int]]
    pruned_original_indices: tuple[int, ...]
    kept_original_indices: tuple[int, ...]

    @property
    def n_pruned(self) -> int:
        return len(self.pruned_original_indices)


def window_cells(center, size: int, side: int) -> frozenset[tuple[int, int]]:
    """Cells of a size x size window centred at ``center``, clipped to the grid."""
    u, v = int(center[0]), int(center[1])
    r = (size - 1) // 2
    return frozenset(
        (i, j) for i in range(max(0, u - r), min(side, u + r + 1)) for j in range(max(0, v - r), min(side, v + r + 1))
    )


def in_window(coords: np.ndarray, center, size: int) -> np.ndarray:
    r = (size - 1) // 2
    return (np.abs(coords[:, 0] - int(center[0])) <= r) & (np.abs(coords[:, 1] - int(center[1])) <= r)


def decide_sample(
    p: np.ndarray,
    coords: np.ndarray,
    original: np.ndarray,
    center,
    side: int,
    cz_size: int,
    prune_count: int,
    protect_cz: bool = True,
) -> PruneDecision:
    """Prune the ``prune_count`` lowest-probability tokens outside the contextual zone.

    Probability ties prune the smaller original index first.
    """
    if protect_cz:
        cz = window_cells(center, cz_size, side)
        inside = in_window(coords, center, cz_size)
    else:
        cz = frozenset()
        inside = np.zeros(len(p), dtype=bool)
    outside = np.flatnonzero(~inside)
    order = outside[np.lexsort((original[outside], p[outside]))]
    k = min(prune_count, len(outside))
    pruned = np.sort(original[order[:k]])
    kept = np.sort(np.setdiff1d(original, pruned))
    return PruneDecision(cz, tuple(int(i) for i in pruned), tuple(int(i) for i in kept))


def decide_pruning(pmap: TargetProbabilityMap, grid: TokenGrid, cfg: ModelConfig) -> list[PruneDecision]:
    if grid.pruned:
        raise PruningError("pruning already ran on this grid")
    if pmap.center is None:
        raise PruningError("aggregate() must run before decide_pruning()")
    xs = grid.rows_of(X)
    if len(xs) != cfg.n_search:
        raise PruningError("decide_pruning expects every search token alive")
    t = cfg.prune_count if cfg.pruning_mode != "none" else 0
    protect = cfg.pruning_mode == "context_aware"
    return [
        decide_sample(
            pmap.p[b],
            grid.coord[b, xs],
            grid.original_index[b, xs],
            pmap.center[b],
            cfg.grid_side,
            cfg.cz_size,
            t,
            protect,
        )
        for b in range(grid.batch)
    ]


def apply_pruning(grid: TokenGrid, decisions: list[PruneDecision]) -> TokenGrid:
    """Drop pruned rows (stable order), clear their alive flags."""
    if len(decisions) != grid.batch:
        raise PruningError("one decision per sample required")
    counts = {d.n_pruned for d in decisions}
    if len(counts) != 1:
        raise PruningError("apply_pruning needs equal prune counts across the batch; split the batch first")
    alive = grid.alive.copy()
    keep_rows = []
    for b, d in enumerate(decisions):
        pr = np.asarray(d.pruned_original_indices, dtype=np.int64)
        if pr.size and not alive[b, pr].all():
            raise PruningError("token pruned twice")
        live_now = grid.original_index[b]
        if not np.isin(pr, live_now).all():
            raise PruningError("decision refers to tokens not in this grid")
        alive[b, pr] = False
        keep_rows.append(np.flatnonzero(~np.isin(live_now, pr)))
    keep = np.stack(keep_rows)
    group = grid.group[keep[0]]
    if any((grid.group[k] != group).any() for k in keep_rows):
        raise PruningError("group layout diverged across batch")
    return TokenGrid(
        tokens=take_rows(grid.tokens, keep),
        group=group,
        coord=np.take_along_axis(grid.coord, keep[:, :, None], axis=1),
        original_index=np.take_along_axis(grid.original_index, keep, axis=1),
        alive=alive,
        grid_side=grid.grid_side,
        pruned=True,
    )
