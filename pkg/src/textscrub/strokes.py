"""Brush strokes and their rasterization to binary masks.

The wire format (shared with the browser client) is::

    {"canvas": {"width": W, "height": H},
     "strokes": [{"points": [[x, y], ...], "radius": r}, ...]}

Rasterization rule, identical on both sides: a pixel belongs to the mask
iff the Euclidean distance from its center (x = column, y = row) to any
stroke's polyline is <= that stroke's radius. A one-point stroke is a disk.
The browser preview and export implement the same rule, verified against
shared fixture vectors, so what the user sees is exactly what the server
erases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Stroke:
    points: list[tuple[float, float]]
    radius: float


@dataclass
class StrokeSet:
    strokes: list[Stroke]
    width: int
    height: int


def parse_strokeset(obj: dict) -> StrokeSet:
    """Validate and convert the wire-format dict. Raises ValueError naming the
    offending stroke index on bad geometry."""
    if not isinstance(obj, dict):
        raise ValueError("stroke payload must be a JSON object")
    canvas = obj.get("canvas")
    if not isinstance(canvas, dict) or "width" not in canvas or "height" not in canvas:
        raise ValueError("stroke payload needs canvas: {width, height}")
    width = int(canvas["width"])
    height = int(canvas["height"])
    if width < 1 or height < 1:
        raise ValueError(f"canvas size must be positive, got {width}x{height}")
    strokes = []
    for idx, raw in enumerate(obj.get("strokes", [])):
        radius = float(raw.get("radius", 0))
        if radius < 1:
            raise ValueError(f"stroke {idx}: radius must be >= 1, got {radius}")
        points = raw.get("points") or []
        if not points:
            raise ValueError(f"stroke {idx}: needs at least one point")
        converted = []
        for x, y in points:
            x = float(x)
            y = float(y)
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise ValueError(
                    f"stroke {idx}: point ({x}, {y}) outside canvas {width}x{height}"
                )
            converted.append((x, y))
        strokes.append(Stroke(points=converted, radius=radius))
    return StrokeSet(strokes=strokes, width=width, height=height)


def strokeset_to_dict(strokeset: StrokeSet) -> dict:
    return {
        "canvas": {"width": strokeset.width, "height": strokeset.height},
        "strokes": [
            {"points": [[x, y] for x, y in s.points], "radius": s.radius}
            for s in strokeset.strokes
        ],
    }


def rasterize_strokes(strokeset: StrokeSet) -> np.ndarray:
    """Binary uint8 (H, W) mask of all stroke capsules (disk-swept polylines)."""
    mask = np.zeros((strokeset.height, strokeset.width), dtype=np.uint8)
    for stroke in strokeset.strokes:
        pts = stroke.points
        if len(pts) == 1:
            _stamp_segment(mask, pts[0], pts[0], stroke.radius)
        else:
            for a, b in zip(pts[:-1], pts[1:]):
                _stamp_segment(mask, a, b, stroke.radius)
    return mask


def _stamp_segment(mask, a, b, radius):
    h, w = mask.shape
    x0 = max(0, int(np.floor(min(a[0], b[0]) - radius)))
    x1 = min(w - 1, int(np.ceil(max(a[0], b[0]) + radius)))
    y0 = max(0, int(np.floor(min(a[1], b[1]) - radius)))
    y1 = min(h - 1, int(np.ceil(max(a[1], b[1]) + radius)))
    if x1 < x0 or y1 < y0:
        return
    xs, ys = np.meshgrid(
        np.arange(x0, x1 + 1, dtype=np.float64), np.arange(y0, y1 + 1, dtype=np.float64)
    )
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    seg_len_sq = dx * dx + dy * dy
    if seg_len_sq == 0:
        dist_sq = (xs - ax) ** 2 + (ys - ay) ** 2
    else:
        t = ((xs - ax) * dx + (ys - ay) * dy) / seg_len_sq
        t = np.clip(t, 0.0, 1.0)
        dist_sq = (xs - (ax + t * dx)) ** 2 + (ys - (ay + t * dy)) ** 2
    mask[y0 : y1 + 1, x0 : x1 + 1] |= dist_sq <= radius * radius
