"""Discriminative selective attention: token partition and per-phase attention masks.

``allow[q, k]`` is True when key ``k`` may contribute to query ``q``'s update.
Under the default ``flow`` reading, "template -> search" means template
features flow into search updates, so search queries always read template
keys while template queries read only the search keys the phase permits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .catp import in_window
from .config import ConfigError, DSA_MODES, ModelConfig
from .tokens import ZD, ZI, X, TokenGrid
from .tpe import TargetProbabilityMap

EARLY, LATE = "early", "late"


class MaskContractError(RuntimeError):
    """A mask was requested without the inputs its phase needs."""


@dataclass(frozen=True)
class TokenPartition:
    xat: frozenset[int]
    xd: frozenset[int]
    xb: frozenset[int]

    @property
    def xnt(self) -> frozenset[int]:
        return self.xd | self.xb

    @property
    def xt(self) -> frozenset[int]:
        return self.xat | self.xd


def partition_sample(
    p: np.ndarray, coords: np.ndarray, original: np.ndarray, center, scz_size: int, threshold: float, use_scz: bool = True
) -> TokenPartition:
    target = p >= threshold
    near = in_window(coords, center, scz_size) if use_scz else np.ones(len(p), dtype=bool)
    return TokenPartition(
        xat=frozenset(int(i) for i in original[target & near]),
        xd=frozenset(int(i) for i in original[target & ~near]),
        xb=frozenset(int(i) for i in original[~target]),
    )


def partition_tokens(
    pmap: TargetProbabilityMap, grid: TokenGrid, cfg: ModelConfig, use_scz: bool = True
) -> list[TokenPartition]:
    """Split live search tokens into actual-target / distractor / background.

    Probabilities are read from ``pmap.p_map`` at each token's cell, so the
    result does not depend on row order or on whether pruning has happened.
    """
    xs = grid.rows_of(X)
    out = []
    for b in range(grid.batch):
        rc = grid.coord[b, xs]
        p = pmap.p_map[b, rc[:, 0], rc[:, 1]]
        out.append(
            partition_sample(
                p, rc, grid.original_index[b, xs], pmap.center[b], cfg.scz_size, cfg.target_threshold, use_scz
            )
        )
    return out


def _labels(grid: TokenGrid, b: int, partition: TokenPartition | None) -> tuple[np.ndarray, np.ndarray]:
    """(is_template, is_xat) per row of sample ``b``."""
    is_template = (grid.group == ZI) | (grid.group == ZD)
    if partition is None:
        return is_template, np.zeros(grid.n_rows, dtype=bool)
    orig = grid.original_index[b]
    is_xat = (grid.group == X) & np.isin(orig, np.fromiter(partition.xat, dtype=np.int64, count=len(partition.xat)))
    return is_template, is_xat


def _allow(grid: TokenGrid, b: int, template_reads: str, partition: TokenPartition | None) -> np.ndarray:
    is_t, is_xat = _labels(grid, b, partition)
    n = grid.n_rows
    allow = np.ones((n, n), dtype=bool)
    if template_reads == "none":
        allow[np.ix_(is_t, ~is_t)] = False
    elif template_reads == "xat":
        allow[np.ix_(is_t, ~is_t & ~is_xat)] = False
    elif template_reads != "all":
        raise ValueError(template_reads)
    return allow


def build_mask(
    phase: str, grid: TokenGrid, partitions: list[TokenPartition] | None = None, arrow_reading: str = "flow"
) -> np.ndarray:
    """[B, N, N] allowance for the proposed attention scheme."""
    if phase == EARLY:
        masks = [_allow(grid, b, "none", None) for b in range(grid.batch)]
    elif phase == LATE:
        if partitions is None:
            raise MaskContractError("late-phase mask needs a token partition")
        masks = [_allow(grid, b, "xat", partitions[b]) for b in range(grid.batch)]
    else:
        raise ValueError(f"unknown phase {phase!r}")
    return _orient(np.stack(masks), arrow_reading)


def _orient(allow: np.ndarray, arrow_reading: str) -> np.ndarray:
    if arrow_reading == "flow":
        return allow
    if arrow_reading == "query":
        return np.swapaxes(allow, -1, -2).copy()
    raise ConfigError(f"unknown arrow_reading {arrow_reading!r}")


def merge_distractors(partition: TokenPartition) -> TokenPartition:
    """Treat distractors as actual targets (attention without the confidence zone)."""
    return TokenPartition(xat=partition.xat | partition.xd, xd=frozenset(), xb=partition.xb)


def ablation_mask(
    mode: str,
    phase: str,
    grid: TokenGrid,
    partitions: list[TokenPartition] | None = None,
    arrow_reading: str = "flow",
) -> np.ndarray:
    """Allowance table for one row of the attention-blocking study.

    ``partitions`` are expected to come from an SCZ-aware split; the
    ``blocked_then_target`` mode folds distractors back into the targets.
    """
    if mode not in DSA_MODES:
        raise ConfigError(f"unknown dsa mode {mode!r}")
    if phase not in (EARLY, LATE):
        raise ValueError(f"unknown phase {phase!r}")
    n = grid.n_rows
    full = np.ones((grid.batch, n, n), dtype=bool)
    if mode == "all_allowed":
        return full
    if mode == "all_blocked":
        return build_mask(EARLY, grid, arrow_reading=arrow_reading)
    if phase == EARLY:
        if mode == "allowed_then_target_scz":
            return full
        return build_mask(EARLY, grid, arrow_reading=arrow_reading)
    if partitions is None:
        raise MaskContractError("late-phase mask needs a token partition")
    if mode == "blocked_then_target":
        partitions = [merge_distractors(p) for p in partitions]
    return build_mask(LATE, grid, partitions, arrow_reading)


def needs_partition(mode: str) -> bool:
    return mode in ("blocked_then_target", "blocked_then_target_scz", "allowed_then_target_scz")


def group_summary(allow: np.ndarray, grid: TokenGrid, partition: TokenPartition | None, b: int = 0) -> dict:
    """Fraction of allowed (query group, key group) pairs for one sample."""
    is_t, is_xat = _labels(grid, b, partition)
    names = np.where(grid.group == ZI, "ZI", np.where(grid.group == ZD, "ZD", np.where(is_xat, "XAT", "XNT")))
    out = {}
    for qn in ("ZI", "ZD", "XAT", "XNT"):
        for kn in ("ZI", "ZD", "XAT", "XNT"):
            q, k = names == qn, names == kn
            if q.any() and k.any():
                out[f"{qn}<-{kn}"] = float(allow[b][np.ix_(q, k)].mean())
    return out
