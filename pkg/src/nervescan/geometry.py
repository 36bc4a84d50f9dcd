"""Axis-aligned boxes shared by the detector, tracker and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

NERVE_CLASS = 1
BACKGROUND_CLASS = 0


@dataclass(frozen=True)
class RoiBox:
    """A candidate region: top-left corner, extent, and class probability."""

    x: int
    y: int
    w: int = 64
    h: int = 64
    prob: float = 1.0
    class_id: int = NERVE_CLASS

    @property
    def area(self):
        return self.w * self.h

    @property
    def center(self):
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def inside(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


def intersection_area(a, b):
    dx = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    dy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if dx <= 0 or dy <= 0:
        return 0
    return dx * dy


def overlap_ratio(a, b):
    """Intersection area over the area of the smaller box."""
    smaller = min(a.area, b.area)
    if smaller <= 0:
        return 0.0
    return intersection_area(a, b) / smaller
