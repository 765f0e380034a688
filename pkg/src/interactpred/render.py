"""Rasterizer for flat-colored synthetic scenes.

Coordinates are normalized to the unit canvas, x to the right and y down.
A pixel is inside a shape when its center is.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 200, 40),
    "purple": (150, 60, 190),
    "orange": (240, 130, 30),
}
AGENT_COLOR = (50, 50, 50)
BACKGROUND = (235, 235, 235)
SHAPE_KINDS = ("square", "circle", "triangle")


@dataclass(frozen=True)
class Shape:
    kind: str
    color: tuple[int, int, int]
    cx: float
    cy: float
    half: float

    def box(self) -> tuple[float, float, float, float]:
        """Tight (cx, cy, w, h) box, clipped to the canvas."""
        x0, y0 = max(self.cx - self.half, 0.0), max(self.cy - self.half, 0.0)
        x1, y1 = min(self.cx + self.half, 1.0), min(self.cy + self.half, 1.0)
        return ((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def moved(self, cx: float, cy: float) -> "Shape":
        return Shape(self.kind, self.color, cx, cy, self.half)


def _grid(size: int):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="xy")


def shape_mask(shape: Shape, size: int) -> np.ndarray:
    xs, ys = _grid(size)
    dx, dy = xs - shape.cx, ys - shape.cy
    h = shape.half
    if shape.kind == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape.kind in ("circle", "disc"):
        return dx * dx + dy * dy <= h * h
    if shape.kind == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= h * h) & (r2 >= (0.55 * h) ** 2)
    if shape.kind == "triangle":
        # apex up, base at cy + h; |dx| shrinks linearly towards the apex
        inside_y = (dy >= -h) & (dy <= h)
        return inside_y & (np.abs(dx) <= (dy + h) / 2)
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def render(shapes, size: int, background=BACKGROUND) -> np.ndarray:
    """Paint shapes in order onto a size x size x 3 uint8 canvas."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[...] = background
    for shape in shapes:
        img[shape_mask(shape, size)] = shape.color
    return img
