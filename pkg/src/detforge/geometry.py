"""Axis-aligned box arithmetic.

Boxes live in continuous pixel coordinates with the origin at the top
left, corner convention: width = x_max - x_min with no +1. Degenerate
(zero-area) boxes are valid values; they have IoU 0 with everything,
including themselves, which avoids 0/0 and matches matching-stage
semantics downstream.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in corner form: (x_min, y_min, x_max, y_max)."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValidationError(
                f"inverted box: ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def shifted(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scaled(self, sx: float, sy: float) -> "BBox":
        """Scale about the origin; factors must be positive."""
        if sx <= 0 or sy <= 0:
            raise ValidationError(f"scale factors must be positive: ({sx}, {sy})")
        return BBox(self.x_min * sx, self.y_min * sy, self.x_max * sx, self.y_max * sy)

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class BoxWH:
    """Origin-anchored box given by strictly positive extents."""

    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"BoxWH extents must be positive: ({self.w}, {self.h})")

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes.

    Returns 0.0 whenever the union has zero area (both boxes degenerate).
    """
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def wh_iou(a: BoxWH, b: BoxWH) -> float:
    """IoU of two boxes anchored at a common corner (dimension-only IoU)."""
    inter = min(a.w, b.w) * min(a.h, b.h)
    return inter / (a.w * a.h + b.w * b.h - inter)


def clip(b: BBox, bounds: BBox) -> Optional[BBox]:
    """Intersection rectangle of ``b`` with ``bounds``, or None if empty."""
    x_min = max(b.x_min, bounds.x_min)
    y_min = max(b.y_min, bounds.y_min)
    x_max = min(b.x_max, bounds.x_max)
    y_max = min(b.y_max, bounds.y_max)
    if x_max <= x_min or y_max <= y_min:
        return None
    return BBox(x_min, y_min, x_max, y_max)


def clamp(b: BBox, bounds: BBox) -> BBox:
    """Clamp all four coordinates into ``bounds``.

    Unlike :func:`clip` this always returns a box; a box fully outside the
    bounds collapses to a degenerate box on the nearest border.
    """

    def cl(v, lo, hi):
        return min(max(v, lo), hi)

    return BBox(
        cl(b.x_min, bounds.x_min, bounds.x_max),
        cl(b.y_min, bounds.y_min, bounds.y_max),
        cl(b.x_max, bounds.x_min, bounds.x_max),
        cl(b.y_max, bounds.y_min, bounds.y_max),
    )


def from_xywh(x: float, y: float, w: float, h: float) -> BBox:
    """Corner-form box from top-left corner plus extents."""
    if w < 0 or h < 0:
        raise ValidationError(f"negative extent: w={w}, h={h}")
    return BBox(x, y, x + w, y + h)


def to_xywh(b: BBox) -> Tuple[float, float, float, float]:
    return (b.x_min, b.y_min, b.width, b.height)


def iou_matrix(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two corner-form box arrays.

    Parameters
    ----------
    boxes1 : (N, 4) array
    boxes2 : (M, 4) array

    Returns
    -------
    (N, M) array of IoU values; pairs with zero-area union give 0.
    """
    boxes1 = np.asarray(boxes1, dtype=np.float64).reshape(-1, 4)
    boxes2 = np.asarray(boxes2, dtype=np.float64).reshape(-1, 4)
    area1 = (boxes1[:, 2] - boxes1[:, 0]) * (boxes1[:, 3] - boxes1[:, 1])
    area2 = (boxes2[:, 2] - boxes2[:, 0]) * (boxes2[:, 3] - boxes2[:, 1])
    ix = np.minimum(boxes1[:, None, 2], boxes2[:, 2]) - np.maximum(
        boxes1[:, None, 0], boxes2[:, 0]
    )
    iy = np.minimum(boxes1[:, None, 3], boxes2[:, 3]) - np.maximum(
        boxes1[:, None, 1], boxes2[:, 1]
    )
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    union = area1[:, None] + area2 - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def wh_iou_matrix(wh1: np.ndarray, wh2: np.ndarray) -> np.ndarray:
    """Pairwise dimension-only IoU between (N, 2) and (M, 2) extent arrays."""
    wh1 = np.asarray(wh1, dtype=np.float64).reshape(-1, 2)
    wh2 = np.asarray(wh2, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(wh1[:, None, :], wh2[None, :, :]).prod(axis=2)
    return inter / (wh1.prod(axis=1)[:, None] + wh2.prod(axis=1) - inter)
