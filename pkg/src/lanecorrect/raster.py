"""Polyline rasterization shared by label generation and mask metrics."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

WALK_STEP = 0.25  # sub-pixel walking step along each segment


def rasterize_polyline(points, h: int, w: int) -> np.ndarray:
    """Mark every pixel visited while walking the polyline at sub-pixel
    steps. Points outside the canvas are clipped silently. Returns a
    (h, w) bool mask."""
    mask = np.zeros((h, w), dtype=bool)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return mask
    if len(pts) == 1:
        _mark(mask, pts[:, 0], pts[:, 1], h, w)
        return mask
    for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
        span = max(abs(bx - ax), abs(by - ay))
        n = max(1, int(np.ceil(span / WALK_STEP)))
        ts = np.arange(n + 1) / n
        _mark(mask, ax + ts * (bx - ax), ay + ts * (by - ay), h, w)
    return mask


def _mark(mask, xs, ys, h, w):
    cols = np.floor(xs).astype(np.int64)
    rows = np.floor(ys).astype(np.int64)
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    mask[rows[ok], cols[ok]] = True


def dilate_chebyshev(mask: np.ndarray, radius: int) -> np.ndarray:
    """Dilate a bool mask by a square (Chebyshev) ball of the given radius."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0 or not mask.any():
        return mask.copy()
    size = 2 * radius + 1
    return ndimage.binary_dilation(mask, structure=np.ones((size, size), dtype=bool))
