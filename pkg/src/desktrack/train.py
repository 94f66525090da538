"""Seeded mini-batch training on synthetic sequences."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence as Seq

import numpy as np

from .autodiff import AdamW, Tensor, save_checkpoint
from .config import ModelConfig, TrackConfig, TrainConfig
from .model import forward, init_params, total_loss, tpe_active
from .synthetic import Sequence
from .tokens import BoundingBox
from .tracking import crop_square, template_crop

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    curve: list[dict]


def sample_tuple(rng: np.random.Generator, seq: Sequence, frames, mcfg: ModelConfig, tcfg: TrackConfig,
                 train: TrainConfig):
    """One (initial template, dynamic template, search, gt) tuple from a sequence."""
    n = len(frames)
    f0, f1, f2 = (int(v) for v in rng.integers(0, n, size=3))
    zi, box_zi = template_crop(frames[f0], seq.gt[f0], mcfg, tcfg)
    zd, box_zd = template_crop(frames[f1], seq.gt[f1], mcfg, tcfg)
    gt = seq.gt[f2]
    h, w = frames[f2].shape[:2]
    side = np.sqrt(tcfg.search_area_factor * gt.w * w * gt.h * h)
    shift = rng.uniform(-1.0, 1.0, size=2) * train.center_jitter * side
    scale = float(np.exp(rng.uniform(-train.scale_jitter, train.scale_jitter)))
    jittered = BoundingBox(gt.cx + shift[0] / w, gt.cy + shift[1] / h, gt.w * scale, gt.h * scale)
    x, mapping = crop_square(frames[f2], jittered, tcfg.search_area_factor, mcfg.search_size)
    return zi, zd, x, box_zi, box_zd, mapping.to_crop(gt)


def sample_batch(rng, sequences: Seq[Sequence], float_frames, mcfg, tcfg, train: TrainConfig):
    items = []
    for _ in range(train.batch_size):
        k = int(rng.integers(len(sequences)))
        items.append(sample_tuple(rng, sequences[k], float_frames[k], mcfg, tcfg, train))
    zi, zd, x, bzi, bzd, gt = zip(*items)
    return np.stack(zi), np.stack(zd), np.stack(x), list(bzi), list(bzd), list(gt)


def learning_rate(train: TrainConfig, step: int) -> float:
    """Step decay by ``lr_decay_factor`` once ``lr_decay_at`` of the run has elapsed."""
    if train.steps and step >= int(train.lr_decay_at * train.steps):
        return train.lr * train.lr_decay_factor
    return train.lr


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values() if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total


def train(
    sequences: Seq[Sequence],
    mcfg: ModelConfig,
    tcfg: TrackConfig,
    train_cfg: TrainConfig,
    params: dict[str, Tensor] | None = None,
    checkpoint_dir: str | Path | None = None,
    fixed_batch=None,
) -> TrainResult:
    """Run ``train_cfg.steps`` AdamW steps. ``fixed_batch`` reuses one batch every step."""
    params = init_params(mcfg, train_cfg.seed) if params is None else params
    rng = np.random.default_rng(train_cfg.seed)
    float_frames = [s.float_frames() for s in sequences]
    trainable = params if tpe_active(mcfg) else {k: v for k, v in params.items() if not k.startswith("tpe.")}
    opt = AdamW(trainable, train_cfg.lr, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps, train_cfg.weight_decay)
    curve = []
    for step in range(train_cfg.steps):
        batch = fixed_batch if fixed_batch is not None else sample_batch(
            rng, sequences, float_frames, mcfg, tcfg, train_cfg
        )
        zi, zd, x, bzi, bzd, gt = batch
        opt.learning_rate = learning_rate(train_cfg, step)
        opt.zero_grad()
        res = forward(params, mcfg, zi, zd, x, bzi, bzd)
        loss, parts = total_loss(res, gt, mcfg)
        if not np.isfinite(loss.data).all():
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "nan_dump.ckpt", params)
            raise NumericalError(f"non-finite loss at step {step}: {parts}")
        loss.backward()
        gnorm = clip_gradients(params, train_cfg.grad_clip)
        opt.step()
        curve.append({"step": step, "lr": opt.learning_rate, **parts, "grad_norm": gnorm})
        if train_cfg.log_every and step % train_cfg.log_every == 0:
            log.info("step %d loss %.4f %s", step, parts["total"], parts)
        if checkpoint_dir is not None and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step_{step + 1:06d}.ckpt", params)
    return TrainResult(params, curve)


CURVE_FIELDS = ("step", "lr", "total", "cls", "giou", "l1", "tpe", "grad_norm")


def write_curve(path: str | Path, curve: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CURVE_FIELDS)
        for row in curve:
            wr.writerow([row["step"]] + [repr(float(row[k])) for k in CURVE_FIELDS[1:]])
