"""Box and tube geometry: IoU, generalised IoU, L1 distance, 3D tube IoU.

Boxes are stored in center form (cx, cy, w, h), normalised to [0, 1]
relative to the frame, which matches the parameterisation emitted by the
localisation head.  Corner form (x0, y0, x1, y1) is a derived view.
Degenerate (zero-area) boxes are legal everywhere and score IoU 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in center form, normalised coordinates."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box width/height must be >= 0, got w={self.w} h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) view; x0 <= x1 and y0 <= y1 by construction."""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @staticmethod
    def from_corners(x0: float, y0: float, x1: float, y1: float) -> "Box":
        return Box((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass
class Tube:
    """Sequence of per-frame boxes for one actor over a frame interval.

    ``boxes[k]`` is the box at frame ``first_frame + k`` or None when the
    actor is absent there.  At least one box must be present.
    """

    first_frame: int
    boxes: list  # list[Optional[Box]]
    actor_id: object = None
    class_id: int = -1

    def __post_init__(self):
        if not any(b is not None for b in self.boxes):
            raise ValueError("tube must contain at least one present box")

    @property
    def last_frame(self) -> int:
        """Exclusive end of the frame interval."""
        return self.first_frame + len(self.boxes)

    def box_at(self, frame: int) -> Optional[Box]:
        k = frame - self.first_frame
        if 0 <= k < len(self.boxes):
            return self.boxes[k]
        return None

    def present_frames(self) -> list[int]:
        return [self.first_frame + k for k, b in enumerate(self.boxes) if b is not None]


def _corner_terms(a: Box, b: Box):
    """(inter, union, hull) computed consistently in corner space so the
    identical-box case is exact."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = iw * ih if iw > 0.0 and ih > 0.0 else 0.0
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    union = area_a + area_b - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, hull


def iou(a: Box, b: Box) -> float:
    """Intersection over union, in [0, 1].  Degenerate boxes yield 0."""
    inter, union, _ = _corner_terms(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalised IoU: iou - (hull - union) / hull, in (-1, 1].

    Equals iou when the enclosing hull coincides with the union.  Pairs
    of degenerate boxes (zero union, which also covers the zero-area
    hull) carry no overlap information and score 0 by convention, which
    keeps the value strictly above -1.
    """
    inter, union, hull = _corner_terms(a, b)
    if hull <= 0.0 or union <= 0.0:
        return 0.0
    # the hull contains the union, so a negative gap is rounding noise;
    # clamping keeps giou <= iou exactly
    return inter / union - max(hull - union, 0.0) / hull


def box_l1(a: Box, b: Box) -> float:
    """Sum of absolute coordinate differences over (cx, cy, w, h)."""
    return (abs(a.cx - b.cx) + abs(a.cy - b.cy)
            + abs(a.w - b.w) + abs(a.h - b.h))


def tube_iou_3d(a: Tube, b: Tube) -> float:
    """Spatio-temporal IoU: sum of per-frame intersections over sum of unions.

    The sum runs over the union of the two present-frame sets.  A frame
    where only one tube is present contributes that box's area to the
    union and nothing to the intersection (standard tube-benchmark
    convention).
    """
    frames_a = set(a.present_frames())
    frames_b = set(b.present_frames())
    frames = frames_a | frames_b
    if not frames:
        raise ValueError("empty tubes")
    inter_sum = 0.0
    union_sum = 0.0
    for t in sorted(frames):
        ba = a.box_at(t)
        bb = b.box_at(t)
        if ba is not None and bb is not None:
            inter, union, _ = _corner_terms(ba, bb)
            inter_sum += inter
            union_sum += union
        elif ba is not None:
            x0, y0, x1, y1 = ba.corners()
            union_sum += (x1 - x0) * (y1 - y0)
        elif bb is not None:
            x0, y0, x1, y1 = bb.corners()
            union_sum += (x1 - x0) * (y1 - y0)
    if union_sum <= 0.0:
        return 0.0
    return inter_sum / union_sum


# Vectorised pairwise forms used by the matching cost and the evaluators.
# Arrays hold center-form rows [cx, cy, w, h].

def boxes_to_corners(boxes: np.ndarray) -> np.ndarray:
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def corners_to_boxes(corners: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = corners[..., 0], corners[..., 1], corners[..., 2], corners[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix [n, m] between center-form box arrays [n, 4] and [m, 4]."""
    i, u, _ = _pairwise_terms(a, b)
    out = np.zeros_like(u)
    np.divide(i, u, out=out, where=u > 0)
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU matrix [n, m] between center-form box arrays; degenerate
    pairs (zero union) score 0, as in the scalar form."""
    i, u, hull = _pairwise_terms(a, b)
    valid = (u > 0) & (hull > 0)
    iou_m = np.zeros_like(u)
    np.divide(i, u, out=iou_m, where=valid)
    out = iou_m - np.clip(hull - u, 0.0, None) / np.where(valid, hull, 1.0)
    return np.where(valid, out, 0.0)


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a[:, None, :] - b[None, :, :]).sum(axis=-1)


def _pairwise_terms(a: np.ndarray, b: np.ndarray):
    ca = boxes_to_corners(np.asarray(a, dtype=np.float64))
    cb = boxes_to_corners(np.asarray(b, dtype=np.float64))
    lt = np.maximum(ca[:, None, :2], cb[None, :, :2])
    rb = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    hlt = np.minimum(ca[:, None, :2], cb[None, :, :2])
    hrb = np.maximum(ca[:, None, 2:], cb[None, :, 2:])
    hwh = np.clip(hrb - hlt, 0.0, None)
    hull = hwh[..., 0] * hwh[..., 1]
    return inter, union, hull
