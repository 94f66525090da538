"""Patch tokens, positional embeddings and token bookkeeping across pruning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat, matmul, take_rows
from .config import ConfigError, ModelConfig

ZI, ZD, X = 0, 1, 2
GROUP_NAMES = {ZI: "ZI", ZD: "ZD", X: "X"}


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, centre and size normalised to its image."""

    cx: float
    cy: float
    w: float
    h: float

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(*(float(v) for v in a))

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BoundingBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """H x W x 3 image -> [N, 3*P*P] rows, row-major over patches, channel-major within."""
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    patches = image.reshape(gh, p, gw, p, c).transpose(0, 2, 4, 1, 3)
    return patches.reshape(gh * gw, c * p * p).astype(np.float64)


def unpatchify(tokens: np.ndarray, patch_size: int, height: int, width: int, channels: int = 3) -> np.ndarray:
    p = patch_size
    gh, gw = height // p, width // p
    patches = tokens.reshape(gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2)
    return patches.reshape(height, width, channels)


@dataclass
class TokenGrid:
    """A batch of concatenated [ZI; ZD; X] token sequences.

    ``tokens`` holds only live rows. ``group`` is shared across the batch (the
    group layout never changes, only the number of X rows). ``coord`` and
    ``original_index`` follow each row through pruning and reordering;
    ``alive`` is indexed by original index.
    """

    tokens: Tensor  # [B, N, D]
    group: np.ndarray  # [N]
    coord: np.ndarray  # [B, N, 2] (row, col) in the row's own grid
    original_index: np.ndarray  # [B, N]
    alive: np.ndarray  # [B, N_total]
    grid_side: int
    pruned: bool = False

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_rows(self) -> int:
        return self.tokens.shape[1]

    def rows_of(self, group: int) -> np.ndarray:
        return np.flatnonzero(self.group == group)

    def with_tokens(self, tokens: Tensor) -> "TokenGrid":
        if tokens.shape[:2] != self.tokens.shape[:2]:
            raise ValueError("replacement tokens must keep the row layout")
        return TokenGrid(tokens, self.group, self.coord, self.original_index, self.alive, self.grid_side, self.pruned)

    def permute_search(self, perms: np.ndarray) -> "TokenGrid":
        """Reorder X rows per sample (``perms`` [B, N_x] of positions within the X block)."""
        xs = self.rows_of(X)
        order = np.tile(np.arange(self.n_rows), (self.batch, 1))
        order[:, xs] = xs[np.asarray(perms)]
        return TokenGrid(
            take_rows(self.tokens, order),
            self.group,
            np.take_along_axis(self.coord, order[:, :, None], axis=1),
            np.take_along_axis(self.original_index, order, axis=1),
            self.alive,
            self.grid_side,
            self.pruned,
        )

    def select_batch(self, which: np.ndarray) -> "TokenGrid":
        from .autodiff import take

        which = np.asarray(which)
        return TokenGrid(
            take(self.tokens, which, axis=0),
            self.group,
            self.coord[which],
            self.original_index[which],
            self.alive[which],
            self.grid_side,
            self.pruned,
        )


def grid_coords(side: int) -> np.ndarray:
    r, c = np.divmod(np.arange(side * side), side)
    return np.stack([r, c], axis=1)


def embed(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    zi_patches: np.ndarray,
    zd_patches: np.ndarray,
    x_patches: np.ndarray,
) -> TokenGrid:
    """Project patch batches ([B, N_g, 3P^2] each) to D, add per-group positions, concatenate."""
    parts = []
    for name, patches in (("zi", zi_patches), ("zd", zd_patches), ("x", x_patches)):
        proj = add(matmul(Tensor(patches), params["embed.w"]), params["embed.b"])
        parts.append(add(proj, params[f"pos.{name}"]))
    tokens = concat(parts, axis=1)
    b = tokens.shape[0]
    nt, nx = cfg.n_template, cfg.n_search
    group = np.concatenate([np.full(nt, ZI), np.full(nt, ZD), np.full(nx, X)]).astype(np.int8)
    coord = np.concatenate([grid_coords(cfg.template_side)] * 2 + [grid_coords(cfg.grid_side)])
    n = len(group)
    return TokenGrid(
        tokens=tokens,
        group=group,
        coord=np.broadcast_to(coord, (b, n, 2)).copy(),
        original_index=np.tile(np.arange(n), (b, 1)),
        alive=np.ones((b, n), dtype=bool),
        grid_side=cfg.grid_side,
    )


def cells_in_box(side: int, box: BoundingBox) -> tuple[np.ndarray, bool]:
    """Flat cell indices of a side x side grid whose centres lie in ``box``.

    Returns ``(indices, fell_back)``; an empty selection falls back to the
    single cell containing the box centre.
    """
    coords = grid_coords(side)
    cy = (coords[:, 0] + 0.5) / side
    cx = (coords[:, 1] + 0.5) / side
    inside = (cx >= box.x0) & (cx <= box.x1) & (cy >= box.y0) & (cy <= box.y1)
    idx = np.flatnonzero(inside)
    if idx.size:
        return idx, False
    r = int(np.clip(np.floor(box.cy * side), 0, side - 1))
    c = int(np.clip(np.floor(box.cx * side), 0, side - 1))
    return np.array([r * side + c]), True


def select_bbox_tokens(grid: TokenGrid, group: int, box: BoundingBox, sample: int = 0) -> tuple[np.ndarray, bool]:
    """Row positions (in storage order) of ``group`` tokens inside ``box`` for one sample."""
    if group not in (ZI, ZD):
        raise ValueError("bounding-box selection applies to template groups only")
    rows = grid.rows_of(group)
    side = int(round(np.sqrt(len(rows))))
    cells, fell_back = cells_in_box(side, box)
    rc = grid.coord[sample, rows]
    flat = rc[:, 0] * side + rc[:, 1]
    return rows[np.isin(flat, cells)], fell_back


def live_search_map(grid: TokenGrid) -> np.ndarray:
    """[B, G, G] occupancy of live search tokens."""
    g = grid.grid_side
    xs = grid.rows_of(X)
    out = np.zeros((grid.batch, g, g), dtype=bool)
    for b in range(grid.batch):
        rc = grid.coord[b, xs]
        out[b, rc[:, 0], rc[:, 1]] = True
    return out


def search_cell_index(grid: TokenGrid) -> np.ndarray:
    """[B, N_x_live] flat G x G cell index of each live X row."""
    xs = grid.rows_of(X)
    rc = grid.coord[:, xs]
    return rc[..., 0] * grid.grid_side + rc[..., 1]
