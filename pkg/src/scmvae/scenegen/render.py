"""Anti-aliased grayscale rasterizer for the synthetic scenes.

Shapes are painted back-to-front on a supersampled canvas (4x in each axis),
then box-downsampled, which gives stable reconstruction targets even at 32x32.
All coordinates are in the unit square with y pointing down.
"""

from __future__ import annotations

import numpy as np

SUPERSAMPLE = 4


class Canvas:
    def __init__(self, size: int, background: float = 1.0):
        self.size = size
        s = size * SUPERSAMPLE
        self.buf = np.full((s, s), background, dtype=np.float32)
        # pixel-center coordinates of the supersampled grid
        c = (np.arange(s, dtype=np.float32) + 0.5) / s
        self.xs = c[None, :]
        self.ys = c[:, None]

    def paint(self, mask: np.ndarray, value: float) -> None:
        self.buf[mask] = value

    def disc(self, cx: float, cy: float, r: float, value: float) -> None:
        self.paint((self.xs - cx) ** 2 + (self.ys - cy) ** 2 <= r * r, value)

    def ellipse(self, cx: float, cy: float, a: float, b: float, value: float) -> None:
        self.paint(((self.xs - cx) / a) ** 2 + ((self.ys - cy) / b) ** 2 <= 1.0, value)

    def rect(self, x0: float, x1: float, y0: float, y1: float, value: float) -> None:
        self.paint((self.xs >= x0) & (self.xs <= x1) & (self.ys >= y0) & (self.ys <= y1), value)

    def capsule(self, p0: tuple, p1: tuple, radius: float, value: float) -> None:
        """Thick line segment (distance-to-segment <= radius)."""
        px, py = p0
        qx, qy = p1
        dx, dy = qx - px, qy - py
        denom = dx * dx + dy * dy
        if denom < 1e-18:
            self.disc(px, py, radius, value)
            return
        t = ((self.xs - px) * dx + (self.ys - py) * dy) / denom
        t = np.clip(t, 0.0, 1.0)
        distsq = (self.xs - (px + t * dx)) ** 2 + (self.ys - (py + t * dy)) ** 2
        self.paint(distsq <= radius * radius, value)

    def polyline(self, points: np.ndarray, radius: float, value: float) -> None:
        for a, b in zip(points[:-1], points[1:]):
            self.capsule(tuple(a), tuple(b), radius, value)

    def image(self) -> np.ndarray:
        """Downsampled float image in [0,1], shape (size, size)."""
        s = SUPERSAMPLE
        return self.buf.reshape(self.size, s, self.size, s).mean(axis=(1, 3))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(img * 255.0 + 0.5, 0.0, 255.0).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 255.0
