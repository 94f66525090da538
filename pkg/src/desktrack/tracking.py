"""Crop geometry, the per-frame tracking loop and dynamic-template management."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.ndimage import map_coordinates

from .config import ModelConfig, TrackConfig
from .model import decode_box, forward
from .tokens import BoundingBox


@dataclass(frozen=True)
class CropMapping:
    """Square crop of side ``side`` pixels whose top-left is (x0, y0) in the frame."""

    x0: float
    y0: float
    side: float
    frame_w: int
    frame_h: int

    def to_crop(self, box: BoundingBox) -> BoundingBox:
        """Frame-normalised box -> crop-normalised box."""
        cx = (box.cx * self.frame_w - self.x0) / self.side
        cy = (box.cy * self.frame_h - self.y0) / self.side
        return BoundingBox(cx, cy, box.w * self.frame_w / self.side, box.h * self.frame_h / self.side)

    def to_frame(self, box: BoundingBox) -> BoundingBox:
        cx = (box.cx * self.side + self.x0) / self.frame_w
        cy = (box.cy * self.side + self.y0) / self.frame_h
        return BoundingBox(cx, cy, box.w * self.side / self.frame_w, box.h * self.side / self.frame_h)


def crop_square(frame: np.ndarray, box: BoundingBox, area_factor: float, out_size: int, min_side: float = 1.0):
    """Bilinear crop centred on ``box`` with side sqrt(area_factor * w * h) pixels.

    Out-of-frame samples replicate the border. Returns (crop, mapping).
    """
    h, w = frame.shape[:2]
    bw, bh = box.w * w, box.h * h
    if bw <= 0 or bh <= 0:
        warnings.warn("zero-size box clamped to one patch", RuntimeWarning, stacklevel=2)
        bw, bh = max(bw, min_side), max(bh, min_side)
    side = float(np.sqrt(area_factor * bw * bh))
    x0 = box.cx * w - side / 2
    y0 = box.cy * h - side / 2
    mapping = CropMapping(x0, y0, side, w, h)
    step = side / out_size
    coords = (np.arange(out_size) + 0.5) * step - 0.5
    yy, xx = np.meshgrid(y0 + coords, x0 + coords, indexing="ij")
    img = np.asarray(frame, dtype=np.float64)
    crop = np.stack(
        [map_coordinates(img[:, :, c], [yy, xx], order=1, mode="nearest") for c in range(img.shape[2])], axis=-1
    )
    return crop, mapping


def crop_regions(frame: np.ndarray, box: BoundingBox, model_cfg: ModelConfig, track_cfg: TrackConfig):
    """Search crop around ``box`` at the configured area factor."""
    return crop_square(frame, box, track_cfg.search_area_factor, model_cfg.search_size, model_cfg.patch_size)


def template_crop(frame: np.ndarray, box: BoundingBox, model_cfg: ModelConfig, track_cfg: TrackConfig):
    crop, mapping = crop_square(frame, box, track_cfg.template_area_factor, model_cfg.template_size)
    return crop, mapping.to_crop(box)


def clamp_box(box: BoundingBox, min_size: float = 1e-3) -> BoundingBox:
    """Clip a frame-normalised box to [0, 1] and keep it non-degenerate."""
    x0, x1 = np.clip([box.x0, box.x1], 0.0, 1.0)
    y0, y1 = np.clip([box.y0, box.y1], 0.0, 1.0)
    if x1 - x0 < min_size:
        c = float(np.clip(box.cx, min_size / 2, 1 - min_size / 2))
        x0, x1 = c - min_size / 2, c + min_size / 2
    if y1 - y0 < min_size:
        c = float(np.clip(box.cy, min_size / 2, 1 - min_size / 2))
        y0, y1 = c - min_size / 2, c + min_size / 2
    return BoundingBox.from_corners(float(x0), float(y0), float(x1), float(y1))


@dataclass
class TrackState:
    initial_template: np.ndarray
    initial_box: BoundingBox  # in template-crop coordinates
    dynamic_template: np.ndarray
    dynamic_box: BoundingBox
    last_box: BoundingBox  # frame coordinates
    frame_index: int = 0
    last_update_frame: int = 0
    rng_seed: int = 0
    updates: list[int] = field(default_factory=list)


@dataclass
class Prediction:
    box: BoundingBox  # search-crop coordinates
    score: float
    diagnostics: object | None = None


# (zi, zd, x, box_zi, box_zd) -> Prediction
Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray, BoundingBox, BoundingBox], Prediction]


def model_predictor(params, cfg: ModelConfig, keep_diagnostics: bool = False) -> Predictor:
    def predict(zi, zd, x, box_zi, box_zd) -> Prediction:
        res = forward(params, cfg, zi[None], zd[None], x[None], [box_zi], [box_zd])
        box = decode_box(res.outputs, 0)
        return Prediction(box, float(res.outputs.cls.data[0].max()), res if keep_diagnostics else None)

    return predict


def init_state(frame: np.ndarray, box: BoundingBox, model_cfg: ModelConfig, track_cfg: TrackConfig, seed: int = 0):
    tmpl, tbox = template_crop(frame, box, model_cfg, track_cfg)
    return TrackState(tmpl, tbox, tmpl.copy(), tbox, box, 0, 0, seed)


def update_dynamic_template(
    state: TrackState, frame: np.ndarray, score: float, model_cfg: ModelConfig, track_cfg: TrackConfig
) -> TrackState:
    """Every ``update_interval`` frames, swap in a crop at the current box if the score clears the threshold."""
    if not track_cfg.dynamic_update:
        return state
    if state.frame_index % track_cfg.update_interval != 0 or score <= track_cfg.update_threshold:
        return state
    tmpl, tbox = template_crop(frame, state.last_box, model_cfg, track_cfg)
    return replace(
        state,
        dynamic_template=tmpl,
        dynamic_box=tbox,
        last_update_frame=state.frame_index,
        updates=state.updates + [state.frame_index],
    )


def track_sequence(
    frames: list[np.ndarray],
    init_box: BoundingBox,
    model_cfg: ModelConfig,
    track_cfg: TrackConfig,
    predictor: Predictor,
    seed: int = 0,
    on_frame: Callable[[int, Prediction, CropMapping], None] | None = None,
):
    """Run the tracker; returns (boxes per frame in frame coordinates, final state).

    Frame 0 reports ``init_box``.
    """
    state = init_state(frames[0], init_box, model_cfg, track_cfg, seed)
    boxes = [init_box]
    for i in range(1, len(frames)):
        frame = frames[i]
        search, mapping = crop_regions(frame, state.last_box, model_cfg, track_cfg)
        pred = predictor(state.initial_template, state.dynamic_template, search, state.initial_box, state.dynamic_box)
        box = clamp_box(mapping.to_frame(pred.box))
        state = replace(state, last_box=box, frame_index=i)
        state = update_dynamic_template(state, frame, pred.score, model_cfg, track_cfg)
        if on_frame is not None:
            on_frame(i, pred, mapping)
        boxes.append(box)
    return boxes, state
