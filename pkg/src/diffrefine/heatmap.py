"""Heatmaps on a fixed pixel lattice and the geometric helpers used everywhere else.

A heatmap is a plain ``float32`` numpy array of shape ``(height, width)``.
Points are normalized ``(x, y)`` pairs where pixel column ``c`` maps to
``x = c / (width - 1)`` and row ``r`` to ``y = r / (height - 1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument, InvalidData

DEFAULT_SIGMA = 3.0


@dataclass(frozen=True)
class GridSize:
    height: int = 64
    width: int = 64

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise InvalidArgument(f"grid must be at least 2x2, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def square(cls, n: int) -> "GridSize":
        return cls(n, n)


class Point(NamedTuple):
    x: float
    y: float


def point_to_pixel(p: Point, size: GridSize) -> tuple[float, float]:
    """Return the (row, col) pixel coordinate of a normalized point, unrounded."""
    return p.y * (size.height - 1), p.x * (size.width - 1)


def pixel_to_point(row: float, col: float, size: GridSize) -> Point:
    return Point(col / (size.width - 1), row / (size.height - 1))


def _check_point(p) -> Point:
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvalidArgument(f"non-finite point {p!r}")
    return Point(x, y)


def render_gaussian(center, sigma: float = DEFAULT_SIGMA, size: GridSize = GridSize()) -> np.ndarray:
    """Peak-normalized isotropic Gaussian centred on the pixel nearest ``center``."""
    center = _check_point(center)
    if not (math.isfinite(sigma) and sigma > 0):
        raise InvalidArgument(f"sigma must be positive, got {sigma}")
    r, c = point_to_pixel(center, size)
    # half-up rounding: (0.5, 0.5) on 64x64 lands on pixel (32, 32)
    r0 = min(max(math.floor(r + 0.5), 0), size.height - 1)
    c0 = min(max(math.floor(c + 0.5), 0), size.width - 1)
    rows = (np.arange(size.height) - r0) ** 2
    cols = (np.arange(size.width) - c0) ** 2
    d2 = rows[:, None] + cols[None, :]
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)


def render_gaussians(centers: np.ndarray, sigma: float, size: GridSize) -> np.ndarray:
    """Vectorized ``render_gaussian`` over an ``(n, 2)`` array of points."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    r0 = np.clip(np.floor(centers[:, 1] * (size.height - 1) + 0.5), 0, size.height - 1)
    c0 = np.clip(np.floor(centers[:, 0] * (size.width - 1) + 0.5), 0, size.width - 1)
    rows = (np.arange(size.height)[None, :] - r0[:, None]) ** 2
    cols = (np.arange(size.width)[None, :] - c0[:, None]) ** 2
    d2 = rows[:, :, None] + cols[:, None, :]
    return np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)


def argmax_point(h: np.ndarray) -> Point:
    """Location of the first maximal pixel in row-major order. NaNs are skipped."""
    h = np.asarray(h)
    if h.ndim != 2 or h.size == 0:
        raise InvalidArgument(f"expected a non-empty 2D heatmap, got shape {h.shape}")
    if np.all(np.isnan(h)):
        raise InvalidData("heatmap is all-NaN")
    idx = int(np.nanargmax(h))
    row, col = divmod(idx, h.shape[1])
    return pixel_to_point(row, col, GridSize(*h.shape))


def argmax_points(hs: np.ndarray) -> np.ndarray:
    """Batched argmax for an ``(n, H, W)`` stack; returns ``(n, 2)`` normalized xy."""
    hs = np.asarray(hs)
    n, height, width = hs.shape
    idx = np.argmax(hs.reshape(n, -1), axis=1)
    rows, cols = np.divmod(idx, width)
    return np.stack([cols / (width - 1), rows / (height - 1)], axis=1)


def l2_distance(a, b) -> float:
    return math.hypot(float(a[0]) - float(b[0]), float(a[1]) - float(b[1]))


def _interp_axis(h: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = h.shape[axis]
    if n_in == n_out:
        return h
    # corner-aligned sampling, consistent with the point/pixel convention above
    src = np.linspace(0.0, n_in - 1, n_out)
    lo = np.clip(np.floor(src).astype(int), 0, n_in - 2)
    frac = src - lo
    a = np.take(h, lo, axis=axis)
    b = np.take(h, lo + 1, axis=axis)
    shape = [1] * h.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def resample(h: np.ndarray, size: GridSize) -> np.ndarray:
    """Bilinear resize. A same-size call returns an exact copy."""
    h = np.asarray(h)
    if h.shape == size.shape:
        return h.copy()
    if min(h.shape) < 2:
        raise InvalidArgument(f"cannot resample heatmap of shape {h.shape}")
    out = _interp_axis(h.astype(np.float64), size.height, 0)
    out = _interp_axis(out, size.width, 1)
    return out.astype(h.dtype if np.issubdtype(h.dtype, np.floating) else np.float32)


def to_distribution(h: np.ndarray) -> np.ndarray:
    """Shift by the minimum and normalize to unit mass; constant maps become uniform."""
    h = np.asarray(h, dtype=np.float64)
    shifted = h - h.min()
    total = shifted.sum()
    if total <= 0:
        return np.full(h.shape, 1.0 / h.size)
    return shifted / total


def entropy(h: np.ndarray) -> float:
    p = to_distribution(h).ravel()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def minmax_scale(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float32)
    lo, hi = float(h.min()), float(h.max())
    if hi - lo <= 0:
        return np.zeros_like(h)
    return (h - lo) / (hi - lo)


def write_pgm(path: str | Path, h: np.ndarray) -> None:
    """Write an 8-bit binary PGM (P5), min-max scaled."""
    h = np.asarray(h, dtype=np.float64)
    lo, hi = np.nanmin(h), np.nanmax(h)
    scaled = np.zeros_like(h) if hi <= lo else (h - lo) / (hi - lo)
    pixels = np.clip(np.rint(np.nan_to_num(scaled) * 255), 0, 255).astype(np.uint8)
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise InvalidData(f"{path}: not a binary PGM")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise InvalidData(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data[pos + 1:pos + 1 + width * height], dtype=np.uint8)
    return pixels.reshape(height, width)
