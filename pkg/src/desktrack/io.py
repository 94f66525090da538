"""PPM images, box CSVs and grid dumps."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from .tokens import BoundingBox


class DataError(ValueError):
    """Malformed or missing input data."""


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Binary P6; float images are taken as [0, 1], gray images are replicated to RGB."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 file to an H x W x 3 uint8 array."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    head, pos = _tokens(buf, 4)
    if head[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM")
    w, h, maxval = (int(t) for t in head[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PPM supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def write_boxes(path: str | Path, boxes: Iterable[BoundingBox | np.ndarray]) -> None:
    """``frame,cx,cy,w,h`` lines, values normalised to the frame."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["frame", "cx", "cy", "w", "h"])
        for i, b in enumerate(boxes):
            arr = b.as_array() if isinstance(b, BoundingBox) else np.asarray(b)
            wr.writerow([i] + [repr(float(v)) for v in arr])


def read_boxes(path: str | Path) -> list[BoundingBox]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    out: list[tuple[int, BoundingBox]] = []
    for row in rows:
        if not row or row[0] == "frame":
            continue
        if len(row) != 5:
            raise DataError(f"{path}: expected 5 columns, got {row}")
        try:
            out.append((int(row[0]), BoundingBox(*(float(v) for v in row[1:]))))
        except ValueError as exc:
            raise DataError(f"{path}: bad row {row}") from exc
    out.sort(key=lambda t: t[0])
    return [b for _, b in out]


def write_grid_csv(path: str | Path, grid: np.ndarray) -> None:
    np.savetxt(path, np.asarray(grid, dtype=np.float64), delimiter=",", fmt="%.17g")


def read_grid_csv(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_heat_ppm(path: str | Path, grid: np.ndarray, cell: int = 8) -> None:
    """Grayscale rendering of a 2-D map, min-max scaled, each cell drawn cell x cell pixels."""
    g = np.asarray(grid, dtype=np.float64)
    span = g.max() - g.min()
    norm = (g - g.min()) / span if span > 0 else np.zeros_like(g)
    write_ppm(path, np.kron(norm, np.ones((cell, cell))))


def sequence_frames(directory: str | Path) -> list[Path]:
    frames = sorted(Path(directory).glob("frame_*.ppm"))
    if not frames:
        raise DataError(f"no frame_*.ppm files in {directory}")
    return frames


def load_sequence(directory: str | Path) -> tuple[list[np.ndarray], list[BoundingBox]]:
    """Frames as float [0, 1] arrays plus ground truth from ``gt.csv``."""
    d = Path(directory)
    frames = [read_ppm(p).astype(np.float64) / 255.0 for p in sequence_frames(d)]
    gt = read_boxes(d / "gt.csv") if (d / "gt.csv").exists() else []
    if gt and len(gt) != len(frames):
        raise DataError(f"{d}: {len(frames)} frames but {len(gt)} boxes")
    return frames, gt
