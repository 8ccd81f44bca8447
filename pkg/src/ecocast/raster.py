"""Grayscale temporal trend images: per-variable line graphs over the look-back
window, aggregated into one grid raster, plus bit-exact PGM (P5) I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import NormStats, WindowBundle

CLAMP_SIGMA = 3.0  # values are clipped to +-3 std before pixel mapping


class RasterError(ValueError):
    pass


@dataclass(frozen=True)
class RasterConfig:
    cell_w: int = 64
    cell_h: int = 64

    def __post_init__(self):
        if self.cell_w < 2 or self.cell_h < 2:
            raise RasterError("cells must be at least 2x2 pixels")


@dataclass(frozen=True)
class TrendImage:
    width: int
    height: int
    pixels: np.ndarray  # row-major floats in {0.0, 1.0}

    def __post_init__(self):
        if self.pixels.shape != (self.height, self.width):
            raise RasterError(f"pixel array {self.pixels.shape} does not match "
                              f"{self.height}x{self.width}")


def interpolate_missing(series, present) -> list[float]:
    """Fill gaps linearly between present neighbours; edge gaps copy the
    nearest present value; an all-absent series becomes zeros."""
    vals = np.asarray(list(series), dtype=np.float64)
    mask = np.asarray(list(present), dtype=bool)
    if vals.shape != mask.shape or vals.ndim != 1 or vals.size < 1:
        raise RasterError("series and presence mask must be equal-length 1-D")
    if not mask.any():
        return [0.0] * vals.size
    idx = np.arange(vals.size, dtype=np.float64)
    filled = np.interp(idx, idx[mask], vals[mask])
    return filled.tolist()


def _bresenham(r0: int, c0: int, r1: int, c1: int):
    """Integer line segment endpoints inclusive."""
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr = 1 if r0 < r1 else -1
    sc = 1 if c0 < c1 else -1
    err = dc - dr
    r, c = r0, c0
    while True:
        yield r, c
        if r == r1 and c == c1:
            return
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def value_to_row(v: float, cell_h: int) -> int:
    """Map a clamped z-value to a pixel row: +3 sigma at the top row, -3 at the bottom."""
    v = min(max(v, -CLAMP_SIGMA), CLAMP_SIGMA)
    return int((CLAMP_SIGMA - v) / (2.0 * CLAMP_SIGMA) * (cell_h - 1))


def day_to_col(j: int, beta: int, cell_w: int) -> int:
    if beta == 1:
        return 0
    return int(j / (beta - 1) * (cell_w - 1))


def grid_shape(n_variables: int) -> tuple[int, int]:
    cols = math.ceil(math.sqrt(n_variables))
    rows = math.ceil(n_variables / cols)
    return rows, cols


def rasterize(bundle: WindowBundle, stats: NormStats, config: RasterConfig) -> TrendImage:
    """One subimage per variable (features in schema order, then target history),
    each a z-normalized line graph of the look-back window, oldest day at the
    left edge. Strokes are 1.0 on a 0.0 background."""
    window = list(reversed(bundle.image_window))  # chronological, day t-beta first
    beta = len(window)
    if beta < 1:
        raise RasterError("empty image window")
    k = len(stats.features)
    n_vars = k + 1
    rows, cols = grid_shape(n_vars)
    if rows * cols < n_vars:
        raise RasterError(f"grid {rows}x{cols} cannot hold {n_vars} variables")
    width, height = cols * config.cell_w, rows * config.cell_h
    pixels = np.zeros((height, width), dtype=np.float64)

    series_list = []
    for j in range(k):
        vals = [rec.features[j] for rec in window]
        pres = [rec.feature_present[j] for rec in window]
        series_list.append((interpolate_missing(vals, pres), stats.features[j]))
    tvals = [rec.target if rec.target is not None else 0.0 for rec in window]
    tpres = [rec.target is not None for rec in window]
    series_list.append((interpolate_missing(tvals, tpres), stats.target))

    for v, (filled, vstats) in enumerate(series_list):
        z = (np.asarray(filled) - vstats.mean) / vstats.std
        prow, pcol = divmod(v, cols)
        top, left = prow * config.cell_h, pcol * config.cell_w
        pts = [(value_to_row(z[j], config.cell_h) + top,
                day_to_col(j, beta, config.cell_w) + left) for j in range(beta)]
        if beta == 1:
            pixels[pts[0]] = 1.0
            continue
        for (r0, c0), (r1, c1) in zip(pts, pts[1:]):
            for r, c in _bresenham(r0, c0, r1, c1):
                pixels[r, c] = 1.0
    return TrendImage(width, height, pixels)


# ---------------------------------------------------------------------------
# PGM (P5) I/O


def write_pgm(img: TrendImage, path) -> None:
    data = img.pixels
    if not np.isin(data, (0.0, 1.0)).all():
        raise RasterError("write_pgm expects binary stroke pixels")
    payload = (data * 255).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(payload)


def read_pgm(path) -> TrendImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise RasterError(f"{path}: not a binary PGM (P5) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            while pos < len(blob) and blob[pos] not in (10, 13):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise RasterError(f"{path}: truncated PGM header")
        fields.append(blob[start:pos])
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise RasterError(f"{path}: malformed PGM header {fields!r}") from None
    if maxval != 255:
        raise RasterError(f"{path}: unsupported maxval {maxval}, expected 255")
    pos += 1  # single whitespace byte after maxval
    payload = blob[pos:]
    if len(payload) != width * height:
        raise RasterError(f"{path}: payload is {len(payload)} bytes, "
                          f"expected {width * height}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return TrendImage(width, height, arr.astype(np.float64) / 255.0)
