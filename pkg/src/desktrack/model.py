"""Masked encoder stack, prediction head and the end-to-end forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import catp, dsa, tpe
from .autodiff import (
    MacCounter,
    Tensor,
    add,
    concat,
    gelu,
    layernorm,
    masked_softmax,
    matmul,
    scatter_rows,
    sigmoid,
    swap_last,
    take,
    take_rows,
)
from .config import ModelConfig
from .losses import focal_loss, gaussian_heatmap, regression_losses, clamp_gt
from .tokens import ZD, ZI, X, BoundingBox, TokenGrid, embed, live_search_map, patchify, search_cell_index

PIXEL_MEAN = 0.5
PIXEL_SCALE = 4.0  # (x - 0.5) * 4 keeps [0, 1] pixels in [-2, 2]


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Fresh parameters; weights ~ N(0, init_std), biases 0, norm gains 1."""
    rng = np.random.default_rng(seed)
    d, r, s = cfg.embed_dim, cfg.mlp_ratio, cfg.init_std
    patch_dim = 3 * cfg.patch_size**2
    arrays: dict[str, np.ndarray] = {}

    def w(name, *shape):
        arrays[name] = rng.normal(0.0, s, size=shape)

    def zeros(name, *shape):
        arrays[name] = np.zeros(shape)

    def ones(name, *shape):
        arrays[name] = np.ones(shape)

    w("embed.w", patch_dim, d)
    zeros("embed.b", d)
    w("pos.zi", cfg.n_template, d)
    w("pos.zd", cfg.n_template, d)
    w("pos.x", cfg.n_search, d)
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        ones(p + "ln1.g", d)
        zeros(p + "ln1.b", d)
        for proj in ("q", "k", "v", "o"):
            w(p + f"attn.{proj}.w", d, d)
            zeros(p + f"attn.{proj}.b", d)
        ones(p + "ln2.g", d)
        zeros(p + "ln2.b", d)
        w(p + "mlp.w1", d, r * d)
        zeros(p + "mlp.b1", r * d)
        w(p + "mlp.w2", r * d, d)
        zeros(p + "mlp.b2", d)
    ones("final_ln.g", d)
    zeros("final_ln.b", d)
    w("tpe.w1", 3 * d, d)
    zeros("tpe.b1", d)
    w("tpe.w2", d, 1)
    zeros("tpe.b2", 1)
    for head, k in (("cls", 1), ("offset", 2), ("size", 2)):
        w(f"head.{head}.w1", d, d)
        zeros(f"head.{head}.b1", d)
        w(f"head.{head}.w2", d, k)
        zeros(f"head.{head}.b2", k)
    # focal-loss prior: initial scores near 0.1
    arrays["head.cls.b2"][:] = -2.19
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def _linear(x: Tensor, params, name: str, mm) -> Tensor:
    return add(mm(x, params[name + ".w"]), params[name + ".b"])


def encoder_layer(
    x: Tensor, allow: np.ndarray, params: dict[str, Tensor], index: int, cfg: ModelConfig,
    counter: MacCounter | None = None,
) -> Tensor:
    """Pre-norm block: x + MHA(LN(x)) under ``allow``, then x + MLP(LN(x))."""
    b, n, d = x.shape
    if allow.shape != (b, n, n):
        raise ValueError(f"mask shape {allow.shape} does not match {b} x {n} tokens")
    mm = counter.matmul if counter is not None else matmul
    p = f"layer{index}."
    h, hd = cfg.num_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return t.reshape(b, n, h, hd).transpose(0, 2, 1, 3)

    y = layernorm(x, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
    q = heads(_linear(y, params, p + "attn.q", mm))
    k = heads(_linear(y, params, p + "attn.k", mm))
    v = heads(_linear(y, params, p + "attn.v", mm))
    scores = mm(q, swap_last(k)) * (1.0 / np.sqrt(hd))
    att = masked_softmax(scores, allow[:, None, :, :])
    ctx = mm(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    x = add(x, _linear(ctx, params, p + "attn.o", mm))
    y = layernorm(x, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
    y = gelu(add(mm(y, params[p + "mlp.w1"]), params[p + "mlp.b1"]))
    return add(x, add(mm(y, params[p + "mlp.w2"]), params[p + "mlp.b2"]))


@dataclass
class HeadOutputs:
    cls_logits: Tensor  # [B, G*G]
    cls: Tensor  # [B, G*G]; pruned cells hold 0
    offset: Tensor  # [B, G*G, 2]
    size: Tensor  # [B, G*G, 2]
    live: np.ndarray  # [B, G*G]
    side: int

    def cls_map(self, b: int = 0) -> np.ndarray:
        return self.cls.data[b].reshape(self.side, self.side)

    def offset_map(self, b: int = 0) -> np.ndarray:
        return self.offset.data[b].reshape(self.side, self.side, 2)

    def size_map(self, b: int = 0) -> np.ndarray:
        return self.size.data[b].reshape(self.side, self.side, 2)


def reconstruct_map(search_tokens: Tensor, cells: np.ndarray, side: int) -> Tensor:
    """Scatter live search rows to their G x G cells; pruned cells become zeros."""
    return scatter_rows(search_tokens, cells, side * side, fill=0.0)


def head_forward(params: dict[str, Tensor], fmap: Tensor, live: np.ndarray | None = None) -> HeadOutputs:
    """Per-cell classification, offset and size heads on a [B, G*G, D] map."""
    b, c, _ = fmap.shape
    side = int(round(np.sqrt(c)))
    live = np.ones((b, c), dtype=bool) if live is None else np.asarray(live, dtype=bool).reshape(b, c)

    def mlp(name):
        hidden = gelu(add(matmul(fmap, params[f"head.{name}.w1"]), params[f"head.{name}.b1"]))
        return add(matmul(hidden, params[f"head.{name}.w2"]), params[f"head.{name}.b2"])

    keep = live.astype(np.float64)
    logits = mlp("cls").reshape(b, c)
    cls = sigmoid(logits) * keep
    offset = sigmoid(mlp("offset")) * keep[..., None]
    size = sigmoid(mlp("size")) * keep[..., None]
    return HeadOutputs(logits, cls, offset, size, live, side)


def decode_box(outputs: HeadOutputs, b: int = 0) -> BoundingBox:
    """Argmax cell (row-major first) plus its offset; size read at the same cell."""
    side = outputs.side
    scores = outputs.cls.data[b]
    cell = int(np.argmax(scores))
    u, v = divmod(cell, side)
    ox, oy = outputs.offset.data[b, cell]
    w, h = outputs.size.data[b, cell]
    return BoundingBox((v + ox) / side, (u + oy) / side, float(w), float(h))


@dataclass
class ForwardResult:
    outputs: HeadOutputs
    pmap: tpe.TargetProbabilityMap
    decisions: list[catp.PruneDecision]
    partitions: list[dsa.TokenPartition] | None
    descriptors: tpe.TargetDescriptors
    tpe_grid: TokenGrid  # grid at the TPE stage (output of layer l, nothing pruned)
    late_grids: list[tuple[np.ndarray, TokenGrid]] = field(default_factory=list)  # (sample idx, final grid)
    trace: list[dict] = field(default_factory=list)


def _preprocess(images: np.ndarray, patch: int) -> np.ndarray:
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    return np.stack([patchify((im - PIXEL_MEAN) * PIXEL_SCALE, patch) for im in imgs])


def forward(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    zi: np.ndarray,
    zd: np.ndarray,
    x: np.ndarray,
    boxes_zi: Sequence[BoundingBox],
    boxes_zd: Sequence[BoundingBox],
    counter: MacCounter | None = None,
    trace: bool = False,
    search_permutation: np.ndarray | None = None,
) -> ForwardResult:
    """Full pipeline on a batch of (initial template, dynamic template, search) images.

    Layers 1..l run under the early mask; TPE scores and CATP prunes between
    layers l and l+1; the surviving tokens are partitioned and layers l+1..L
    run under the late mask; the head reads the zero-filled search map.
    ``search_permutation`` ([B, N_x]) reorders search rows right after
    embedding; results are defined by coordinates so it must not matter.
    """
    grid = embed(params, cfg, _preprocess(zi, cfg.patch_size), _preprocess(zd, cfg.patch_size),
                 _preprocess(x, cfg.patch_size))
    if search_permutation is not None:
        grid = grid.permute_search(search_permutation)
    records: list[dict] = []

    def run_layer(g: TokenGrid, allow: np.ndarray, i: int) -> TokenGrid:
        if counter is not None:
            counter.scope = f"layer{i}"
        out = g.with_tokens(encoder_layer(g.tokens, allow, params, i, cfg, counter))
        if trace:
            records.append({"layer": i, "input": g, "output": out, "allow": allow})
        return out

    early = dsa.ablation_mask(cfg.dsa_mode, dsa.EARLY, grid, arrow_reading=cfg.arrow_reading)
    for i in range(cfg.tpe_layer):
        grid = run_layer(grid, early, i)
    if counter is not None:
        counter.scope = "tpe"

    desc = tpe.compute_descriptors(grid, boxes_zi, boxes_zd)
    pmap = tpe.aggregate(tpe.score_tokens(params, desc, grid))
    decisions = catp.decide_pruning(pmap, grid, cfg)
    tpe_grid = grid

    counts = np.array([d.n_pruned for d in decisions])
    maps, lives, order, late_grids = [], [], [], []
    partitions_all: list[dsa.TokenPartition | None] = [None] * grid.batch
    for n_pruned in np.unique(counts):
        idx = np.flatnonzero(counts == n_pruned)
        sub = grid if len(idx) == grid.batch else grid.select_batch(idx)
        if n_pruned > 0:
            sub = catp.apply_pruning(sub, [decisions[i] for i in idx])
        sub_pmap = tpe.TargetProbabilityMap(p=None, p_map=pmap.p_map[idx], center=pmap.center[idx])
        parts = None
        if dsa.needs_partition(cfg.dsa_mode):
            parts = dsa.partition_tokens(sub_pmap, sub, cfg)
            for j, i in enumerate(idx):
                partitions_all[i] = parts[j]
        late = dsa.ablation_mask(cfg.dsa_mode, dsa.LATE, sub, parts, cfg.arrow_reading)
        for i in range(cfg.tpe_layer, cfg.num_layers):
            sub = run_layer(sub, late, i)
        if counter is not None:
            counter.scope = "head"
        xs = sub.rows_of(X)
        search = take_rows(sub.tokens, np.tile(xs, (sub.batch, 1)))
        search = layernorm(search, params["final_ln.g"], params["final_ln.b"], cfg.ln_eps)
        maps.append(reconstruct_map(search, search_cell_index(sub), cfg.grid_side))
        lives.append(live_search_map(sub).reshape(sub.batch, -1))
        order.append(idx)
        late_grids.append((idx, sub))

    order_all = np.concatenate(order)
    fmap = maps[0] if len(maps) == 1 else take(concat(maps, axis=0), np.argsort(order_all), axis=0)
    live = np.concatenate(lives)[np.argsort(order_all)]
    outputs = head_forward(params, fmap, live)
    parts_out = partitions_all if dsa.needs_partition(cfg.dsa_mode) else None
    return ForwardResult(outputs, pmap, decisions, parts_out, desc, tpe_grid, late_grids, records)


def tpe_active(cfg: ModelConfig) -> bool:
    """Whether token scores influence the forward pass (pruning or partitioning)."""
    return cfg.prunes or dsa.needs_partition(cfg.dsa_mode)


def total_loss(result: ForwardResult, gt_boxes: Sequence[BoundingBox], cfg: ModelConfig):
    """Focal + lambda_iou * GIoU + lambda_l1 * L1 (+ weighted token BCE when TPE is in use).

    Returns ``(loss, parts)`` where ``parts`` maps term names to floats.
    """
    side = cfg.grid_side
    gts = [clamp_gt(b, side) for b in gt_boxes]
    out = result.outputs
    heat = np.stack([gaussian_heatmap(side, b, cfg.heatmap_sigma).reshape(-1) for b in gts])
    l_cls = focal_loss(out.cls_logits, heat, out.live, cfg.focal_alpha, cfg.focal_beta)
    l_giou, l_l1 = regression_losses(out.offset, out.size, gts, side)
    loss = l_cls + cfg.lambda_iou * l_giou + cfg.lambda_l1 * l_l1
    parts = {"cls": float(l_cls.data), "giou": float(l_giou.data), "l1": float(l_l1.data), "tpe": 0.0}
    if cfg.use_tpe_loss and tpe_active(cfg) and cfg.tpe_loss_weight > 0:
        labels = tpe.token_labels(result.tpe_grid, gts)
        l_tpe = tpe.tpe_loss(result.pmap, labels)
        loss = loss + cfg.tpe_loss_weight * l_tpe
        parts["tpe"] = float(l_tpe.data)
    parts["total"] = float(loss.data)
    return loss, parts
