"""Box arithmetic.

Boxes are stored as corners (x_min, y_min, x_max, y_max) in image pixels,
y pointing down. The regression offsets work on centers and sizes:

    tx = (x - x_a) / w_a        tw = log(w / w_a)
    ty = (y - y_a) / h_a        th = log(h / h_a)

where (x, y, w, h) describe the target box and the ``_a`` terms the anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from detection_equity.errors import NumericalError, ValidationError


# ── Types ────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise ValidationError(f"Box has non-finite coordinates: {coords}")
        if self.x_max <= self.x_min or self.y_max <= self.y_min:
            raise ValidationError(f"Box must have positive width and height: {coords}")

    @classmethod
    def from_list(cls, coords: Sequence[float]) -> BBox:
        if len(coords) != 4:
            raise ValidationError(f"Box needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> BBox:
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def center_x(self) -> float:
        return (self.x_min + self.x_max) / 2.0

    @property
    def center_y(self) -> float:
        return (self.y_min + self.y_max) / 2.0

    def translate(self, dx: float, dy: float) -> BBox:
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class BoxOffsets:
    tx: float
    ty: float
    tw: float
    th: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.as_tuple()):
            raise ValidationError(f"Offsets must be finite: {self.as_tuple()}")

    @classmethod
    def from_array(cls, values) -> BoxOffsets:
        tx, ty, tw, th = (float(v) for v in values)
        return cls(tx, ty, tw, th)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.tx, self.ty, self.tw, self.th)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)


# ── Operations ───────────────────────────────────────────────────

def area(b: BBox) -> float:
    return b.width * b.height


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area; 0.0 for disjoint boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = area(a) + area(b) - inter
    return min(1.0, inter / union)


def iou_matrix(boxes_a: Sequence[BBox], boxes_b: Sequence[BBox]) -> np.ndarray:
    """Pairwise IoU, shape (len(boxes_a), len(boxes_b)).

    Same arithmetic as ``iou`` so both agree value for value.
    """
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([box.to_list() for box in boxes_a], dtype=float)
    b = np.array([box.to_list() for box in boxes_b], dtype=float)

    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)

    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(overlap, np.minimum(1.0, inter / union), 0.0)


def encode_offsets(gt: BBox, anchor: BBox) -> BoxOffsets:
    return BoxOffsets(
        tx=(gt.center_x - anchor.center_x) / anchor.width,
        ty=(gt.center_y - anchor.center_y) / anchor.height,
        tw=math.log(gt.width / anchor.width),
        th=math.log(gt.height / anchor.height),
    )


def decode_offsets(t: BoxOffsets, anchor: BBox) -> BBox:
    """Inverse of ``encode_offsets``.

    Offsets whose box overflows the float range or collapses to zero size
    raise ``NumericalError`` naming the offsets.
    """
    try:
        w = anchor.width * math.exp(t.tw)
        h = anchor.height * math.exp(t.th)
    except OverflowError:
        raise NumericalError(f"Offsets {t.as_tuple()} overflow the box size") from None
    cx = t.tx * anchor.width + anchor.center_x
    cy = t.ty * anchor.height + anchor.center_y
    try:
        return BBox.from_center(cx, cy, w, h)
    except ValidationError:
        raise NumericalError(f"Offsets {t.as_tuple()} decode to a degenerate box") from None
