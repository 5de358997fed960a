"""Geometry primitives and overlap measures shared by every finetrack module.

Boxes are stored as continuous left-top-width-height (the OTB ground-truth
convention). Corner form is derived on demand and never stored.
"""

import math
from dataclasses import dataclass


class FinetrackError(Exception):
    """Base class for every error raised by finetrack."""
    pass


class InvalidBoxError(FinetrackError):
    """Raised when a box with non-positive or non-finite extent is built."""
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle in pixels: left edge x, top edge y, width w, height h."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InvalidBoxError(f"box {name} must be finite, got {value!r}")
        if self.w <= 0 or self.h <= 0:
            raise InvalidBoxError(f"box extent must be positive, got w={self.w!r} h={self.h!r}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.w, self.h)

    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        """Return (x1, y1, x2, y2)."""
        return (self.x, self.y, self.x2, self.y2)

    def scaled(self, factor_w: float, factor_h: float = None) -> "BoundingBox":
        """Same center, extent multiplied by the given factors."""
        if factor_h is None:
            factor_h = factor_w
        cx, cy = self.center
        return BoundingBox.from_center(cx, cy, self.w * factor_w, self.h * factor_h)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class TargetState:
    """A tracked state: the box plus the 1-based pyramid level it was found at."""
    box: BoundingBox
    scale_index: int

    def check_range(self, levels: int) -> None:
        if not 1 <= self.scale_index <= levels:
            raise InvalidBoxError(f"scale_index {self.scale_index} outside pyramid range 1..{levels}")


def _intersection(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    # x2 - x can round above w; the overlap never exceeds the smaller box
    return min(iw * ih, a.area(), b.area())


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union in [0, 1], 0.0 for disjoint boxes."""
    if a == b:
        return 1.0
    inter = _intersection(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area() + b.area() - inter
    return min(1.0, inter / union)


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU: IoU minus the share of the enclosing box not covered by the union.

    Ranges over [-1, 1] and keeps decreasing as disjoint boxes move apart.
    """
    inter = _intersection(a, b)
    union = a.area() + b.area() - inter
    enclosing = (max(a.x2, b.x2) - min(a.x, b.x)) * (max(a.y2, b.y2) - min(a.y, b.y))
    value = inter / union - (enclosing - union) / enclosing
    return max(-1.0, min(1.0, value))


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    """Euclidean distance between box centers, in pixels."""
    ax, ay = a.center
    bx, by = b.center
    return math.hypot(ax - bx, ay - by)
