"""Seeded synthetic tracking sequences with scripted distractors.

A scenario is a textured background plus objects that follow piecewise
linear waypoint scripts. The first object is the target; the others are
distractors whose colour is blended toward the target's by ``similarity``
(1.0 makes them identical in colour, they keep their own pattern).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import write_boxes, write_ppm
from .tokens import BoundingBox


@dataclass(frozen=True)
class ObjectSpec:
    color: tuple[float, float, float]
    size: tuple[float, float]  # w, h in pixels
    waypoints: tuple[tuple[int, float, float], ...]  # (frame, x, y) centre in pixels
    pattern: str = "solid"  # solid | bar | ring
    accent: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SyntheticScenario:
    frame_size: tuple[int, int] = (128, 128)  # H, W
    num_frames: int = 40
    background_seed: int = 0
    target: ObjectSpec = ObjectSpec((0.9, 0.2, 0.2), (20, 20), ((0, 64.0, 64.0),), "bar")
    distractors: tuple[ObjectSpec, ...] = ()
    similarity: float = 0.7
    distractor_on_top: bool = False
    noise: float = 0.02
    crossing_frame: int | None = None


@dataclass
class Sequence:
    frames: list[np.ndarray]  # uint8 H x W x 3
    gt: list[BoundingBox]
    distractor_boxes: list[list[BoundingBox]] = field(default_factory=list)
    name: str = ""

    def float_frames(self) -> list[np.ndarray]:
        return [f.astype(np.float64) / 255.0 for f in self.frames]


def position(waypoints, frame: int) -> tuple[float, float]:
    """Piecewise-linear interpolation of a waypoint script (held at both ends)."""
    pts = sorted(waypoints)
    frames = [p[0] for p in pts]
    xs = [p[1] for p in pts]
    ys = [p[2] for p in pts]
    return float(np.interp(frame, frames, xs)), float(np.interp(frame, frames, ys))


def background(h: int, w: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.25, 0.65, size=(h // 16 + 2, w // 16 + 2, 3))
    # bilinear upsample of the coarse grid
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None, None], (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    smooth = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
    fine = rng.normal(0.0, 0.04, size=(h, w, 3))
    return np.clip(smooth + fine, 0.0, 1.0)


def _draw(img: np.ndarray, obj: ObjectSpec, cx: float, cy: float, color) -> None:
    h, w = img.shape[:2]
    ow, oh = obj.size
    yy, xx = np.mgrid[0:h, 0:w]
    px, py = xx + 0.5, yy + 0.5
    inside = (np.abs(px - cx) <= ow / 2) & (np.abs(py - cy) <= oh / 2)
    img[inside] = color
    if obj.pattern == "bar":
        bar = inside & (np.abs(py - cy) <= oh / 8)
        img[bar] = obj.accent
    elif obj.pattern == "ring":
        core = inside & (np.abs(px - cx) <= ow / 5) & (np.abs(py - cy) <= oh / 5)
        img[core] = obj.accent


def deconflict(spec: SyntheticScenario) -> SyntheticScenario:
    """Shift distractors whose frame-0 box overlaps the target's by a seeded jitter."""
    rng = np.random.default_rng(spec.background_seed + 7919)
    tx, ty = position(spec.target.waypoints, 0)
    tw, th = spec.target.size
    fixed = []
    for d in spec.distractors:
        wps = d.waypoints
        for _ in range(64):
            dx, dy = position(wps, 0)
            if abs(dx - tx) >= (tw + d.size[0]) / 2 or abs(dy - ty) >= (th + d.size[1]) / 2:
                break
            sx, sy = rng.uniform(-1, 1, size=2) * (tw + d.size[0])
            first = wps[0]
            wps = ((first[0], first[1] + sx, first[2] + sy),) + tuple(wps[1:])
        fixed.append(ObjectSpec(d.color, d.size, wps, d.pattern, d.accent))
    return SyntheticScenario(
        spec.frame_size, spec.num_frames, spec.background_seed, spec.target, tuple(fixed),
        spec.similarity, spec.distractor_on_top, spec.noise, spec.crossing_frame,
    )


def generate_scenario(spec: SyntheticScenario, name: str = "") -> Sequence:
    spec = deconflict(spec) if spec.crossing_frame is None else spec
    h, w = spec.frame_size
    bg = background(h, w, spec.background_seed)
    noise_rng = np.random.default_rng(spec.background_seed + 104729)
    tcol = np.asarray(spec.target.color)
    frames, gt, dboxes = [], [], []
    for f in range(spec.num_frames):
        img = bg.copy()
        tx, ty = position(spec.target.waypoints, f)
        draws = []
        boxes = []
        for d in spec.distractors:
            dx, dy = position(d.waypoints, f)
            col = spec.similarity * tcol + (1 - spec.similarity) * np.asarray(d.color)
            draws.append((d, dx, dy, col))
            boxes.append(BoundingBox(dx / w, dy / h, d.size[0] / w, d.size[1] / h))
        target_draw = (spec.target, tx, ty, tcol)
        order = [target_draw] + draws if spec.distractor_on_top else draws + [target_draw]
        for obj, cx, cy, col in order:
            _draw(img, obj, cx, cy, col)
        if spec.noise > 0:
            img = img + noise_rng.normal(0.0, spec.noise, size=img.shape)
        frames.append(np.clip(np.round(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8))
        gt.append(BoundingBox(tx / w, ty / h, spec.target.size[0] / w, spec.target.size[1] / h))
        dboxes.append(boxes)
    return Sequence(frames, gt, dboxes, name)


def save_sequence(seq: Sequence, directory: str | Path) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        write_ppm(d / f"frame_{i:04d}.ppm", f)
    write_boxes(d / "gt.csv", seq.gt)
    return d


# -- scenario families -----------------------------------------------------------
PALETTE = np.array(
    [
        (0.90, 0.15, 0.15),
        (0.15, 0.75, 0.20),
        (0.15, 0.30, 0.90),
        (0.95, 0.85, 0.10),
        (0.85, 0.20, 0.85),
        (0.10, 0.85, 0.85),
        (0.95, 0.55, 0.10),
    ]
)
PATTERNS = ("solid", "bar", "ring")


def _walk(rng, start, n_frames, speed, h, w, margin, n_way=4):
    pts = [(0, start[0], start[1])]
    x, y = start
    step = max(1, n_frames // n_way)
    for f in range(step, n_frames + step, step):
        ang = rng.uniform(0, 2 * np.pi)
        x = float(np.clip(x + np.cos(ang) * speed * step, margin, w - margin))
        y = float(np.clip(y + np.sin(ang) * speed * step, margin, h - margin))
        pts.append((min(f, n_frames - 1), x, y))
    return tuple(pts)


def random_scenario(seed: int, kind: str = "distractor", num_frames: int = 40, frame_size=(128, 128)) -> SyntheticScenario:
    """Scenario families: ``plain`` (target only), ``distractor`` (wandering look-alike),
    ``crossing`` (a look-alike passes through the target at a scripted frame)."""
    rng = np.random.default_rng(seed)
    h, w = frame_size
    size = float(rng.uniform(18, 26))
    aspect = float(rng.uniform(0.8, 1.25))
    tsize = (size * aspect, size / aspect)
    ci = rng.permutation(len(PALETTE))
    tcol = tuple(PALETTE[ci[0]])
    accent = tuple(PALETTE[ci[1]])
    tpat = PATTERNS[int(rng.integers(len(PATTERNS)))]
    target_pattern = tpat
    margin = size
    speed = float(rng.uniform(0.5, 1.8))
    start = (float(rng.uniform(margin + 10, w - margin - 10)), float(rng.uniform(margin + 10, h - margin - 10)))
    target_wp = _walk(rng, start, num_frames, speed, h, w, margin)
    target = ObjectSpec(tcol, tsize, target_wp, target_pattern, accent)
    distractors: tuple[ObjectSpec, ...] = ()
    crossing = None
    dpat = PATTERNS[(PATTERNS.index(tpat) + 1 + int(rng.integers(2))) % 3]
    dcol = tuple(PALETTE[ci[2]])
    if kind == "distractor":
        dstart = (float(rng.uniform(margin, w - margin)), float(rng.uniform(margin, h - margin)))
        distractors = (ObjectSpec(dcol, tsize, _walk(rng, dstart, num_frames, speed, h, w, margin), dpat, accent),)
    elif kind == "crossing":
        crossing = int(rng.integers(num_frames // 3, 2 * num_frames // 3))
        cx, cy = position(target_wp, crossing)
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = np.cos(ang) * speed * 1.5, np.sin(ang) * speed * 1.5
        last = num_frames - 1
        wp = (
            (0, cx - vx * crossing, cy - vy * crossing),
            (crossing, cx, cy),
            (last, cx + vx * (last - crossing), cy + vy * (last - crossing)),
        )
        distractors = (ObjectSpec(dcol, tsize, wp, dpat, accent),)
    elif kind != "plain":
        raise ValueError(f"unknown scenario kind {kind!r}")
    return SyntheticScenario(
        frame_size=frame_size,
        num_frames=num_frames,
        background_seed=seed,
        target=target,
        distractors=distractors,
        similarity=float(rng.uniform(0.5, 0.8)),
        distractor_on_top=False,
        noise=0.02,
        crossing_frame=crossing,
    )


def suite(seed: int, count: int, kinds=("plain", "distractor", "crossing"), num_frames: int = 40) -> list[Sequence]:
    out = []
    for i in range(count):
        s = seed * 1000 + i
        kind = kinds[i % len(kinds)]
        out.append(generate_scenario(random_scenario(s, kind, num_frames), name=f"{kind}_{s}"))
    return out
