"""Axis-aligned boxes, IoU and anchor delta coding."""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .exceptions import ShapeError


@dataclass(frozen=True)
class BBox:
    """Box with top-left corner ``(x, y)`` and extents ``(w, h)`` in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ShapeError(f"box extents must be positive, got w={self.w} h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    def within(self, height: int, width: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def clip(self, height: int, width: int) -> "BBox":
        x1, y1 = min(max(self.x, 0.0), width), min(max(self.y, 0.0), height)
        x2, y2 = min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height)
        return BBox(x1, y1, max(x2 - x1, 1e-6), max(y2 - y1, 1e-6))

    def scaled(self, factor: float) -> "BBox":
        return BBox(self.x * factor, self.y * factor, self.w * factor, self.h * factor)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def to_record(self) -> Dict[str, int]:
        """Integer pixel record used by manifests."""
        return {"x": int(round(self.x)), "y": int(round(self.y)), "w": int(round(self.w)), "h": int(round(self.h))}

    @classmethod
    def from_record(cls, record: Dict[str, float]) -> "BBox":
        return cls(float(record["x"]), float(record["y"]), float(record["w"]), float(record["h"]))

    def pixel_slices(self) -> Tuple[slice, slice]:
        """(rows, cols) slices covering the integer pixels of the box."""
        x1, y1 = int(np.floor(self.x)), int(np.floor(self.y))
        x2, y2 = int(np.ceil(self.x2)), int(np.ceil(self.y2))
        return slice(y1, y2), slice(x1, x2)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    rows = [b.as_array() for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (A, 4) and (B, 4) arrays of ``x, y, w, h`` rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0.0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode_deltas(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(dx, dy, log dw, log dh) of ``gt`` boxes relative to ``anchors`` (both x, y, w, h)."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    acx, acy = anchors[:, 0] + 0.5 * anchors[:, 2], anchors[:, 1] + 0.5 * anchors[:, 3]
    gcx, gcy = gt[:, 0] + 0.5 * gt[:, 2], gt[:, 1] + 0.5 * gt[:, 3]
    return np.stack(
        [
            (gcx - acx) / anchors[:, 2],
            (gcy - acy) / anchors[:, 3],
            np.log(gt[:, 2] / anchors[:, 2]),
            np.log(gt[:, 3] / anchors[:, 3]),
        ],
        axis=1,
    )


def decode_deltas(deltas: np.ndarray, anchors: np.ndarray, max_log: float = np.log(1000.0 / 16)) -> np.ndarray:
    """Inverse of ``encode_deltas``; log-size deltas are clamped to keep exp finite."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    acx, acy = anchors[:, 0] + 0.5 * anchors[:, 2], anchors[:, 1] + 0.5 * anchors[:, 3]
    cx = acx + deltas[:, 0] * anchors[:, 2]
    cy = acy + deltas[:, 1] * anchors[:, 3]
    w = anchors[:, 2] * np.exp(np.minimum(deltas[:, 2], max_log))
    h = anchors[:, 3] * np.exp(np.minimum(deltas[:, 3], max_log))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, w, h], axis=1)
