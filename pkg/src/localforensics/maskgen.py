"""Artificial forgery masks: all-real (zeros), all-generated (ones), and the
convex hull of facial landmarks rasterized at pixel centers."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateHullError

MASK_DTYPE = np.uint8


def zeros_mask(h: int, w: int) -> np.ndarray:
    return np.zeros((h, w), MASK_DTYPE)


def ones_mask(h: int, w: int) -> np.ndarray:
    return np.ones((h, w), MASK_DTYPE)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[float, float]]:
    """Counter-clockwise hull by Andrew's monotone chain; collinear points on
    edges are dropped."""
    pts = sorted({(float(x), float(y)) for x, y in points})
    if len(pts) < 3:
        raise DegenerateHullError(f"need at least 3 distinct points, got {len(pts)}")
    lower: list[tuple[float, float]] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[float, float]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 3:
        raise DegenerateHullError("all points are collinear")
    return hull


def inside_convex(polygon, x: float, y: float) -> bool:
    """Point-in-CCW-convex-polygon test, boundary counts as inside."""
    n = len(polygon)
    for i in range(n):
        if _cross(polygon[i], polygon[(i + 1) % n], (x, y)) < 0:
            return False
    return True


def _row_interval(polygon, y: float) -> tuple[float, float] | None:
    xs = []
    n = len(polygon)
    for i in range(n):
        (x0, y0), (x1, y1) = polygon[i], polygon[(i + 1) % n]
        if y0 == y1:
            if y == y0:
                xs += [x0, x1]
            continue
        if min(y0, y1) <= y <= max(y0, y1):
            xs.append(x0 + (y - y0) * (x1 - x0) / (y1 - y0))
    if not xs:
        return None
    return min(xs), max(xs)


def rasterize_hull(polygon, h: int, w: int) -> np.ndarray:
    """Scanline fill of a CCW convex polygon. Pixel (r, c) is set when its
    center (c + 0.5, r + 0.5) lies inside or on the polygon; the ends of each
    span are settled with the exact orientation test."""
    mask = zeros_mask(h, w)
    poly = [(float(x), float(y)) for x, y in polygon]
    ys = [p[1] for p in poly]
    r_lo = max(0, math.floor(min(ys) - 0.5))
    r_hi = min(h - 1, math.ceil(max(ys) - 0.5))
    for r in range(r_lo, r_hi + 1):
        yc = r + 0.5
        span = _row_interval(poly, yc)
        if span is None:
            continue
        c_lo = math.ceil(span[0] - 0.5)
        c_hi = math.floor(span[1] - 0.5)
        if c_lo + 1 <= c_hi - 1:
            a, b = max(c_lo + 1, 0), min(c_hi - 1, w - 1)
            if a <= b:
                mask[r, a:b + 1] = 1
        for c in {c_lo - 1, c_lo, c_hi, c_hi + 1}:
            if 0 <= c < w and inside_convex(poly, c + 0.5, yc):
                mask[r, c] = 1
    return mask


def convex_hull_mask(landmarks, h: int, w: int) -> np.ndarray:
    return rasterize_hull(convex_hull(landmarks), h, w)


# ------------------------------------------------------------------ files


def load_landmarks(path) -> np.ndarray:
    pts = json.loads(Path(path).read_text())
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{path}: expected a JSON array of [x, y] pairs")
    return arr


def save_landmarks(points, path) -> None:
    Path(path).write_text(json.dumps([[float(x), float(y)] for x, y in points]))


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(MASK_DTYPE)
