"""Foreground outlines and the soft blend mask used when merging translations."""

from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage
from skimage.filters import threshold_otsu

from .boxes import BBox
from .exceptions import EmptyForegroundError, ShapeError

# (H, W) float64 array with values in [0, 1]
BlendMask = np.ndarray


def foreground_outline(image: np.ndarray) -> np.ndarray:
    """Largest 4-connected component of the pixels above the Otsu threshold."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[0]
    if np.ptp(image) == 0:
        if image.size and image.flat[0] > 0:
            return np.ones(image.shape, dtype=bool)
        raise EmptyForegroundError("image is uniformly zero; no foreground", error_code="EMPTY_FOREGROUND")

    above = image > threshold_otsu(image)
    labels, count = ndimage.label(above)
    if count == 0:
        raise EmptyForegroundError("no pixel above the automatic threshold", error_code="EMPTY_FOREGROUND")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


class MaskSpec(BaseModel):
    """Band widths of the blend mask.

    With ``reference_side`` set, ``M`` and ``N`` are given for an image of that
    side and scaled proportionally to the actual image's larger side.
    """

    model_config = ConfigDict(extra="forbid")

    M: int = Field(default=128, ge=0)
    N: int = Field(default=128, ge=0)
    reference_side: Optional[int] = Field(default=1024, gt=0)

    def resolve(self, height: int, width: int) -> Tuple[int, int]:
        if self.reference_side is None:
            return self.M, self.N
        factor = max(height, width) / self.reference_side
        return int(round(self.M * factor)), int(round(self.N * factor))


def chessboard_distance(bbox: BBox, image_dims: Tuple[int, int]) -> np.ndarray:
    """Per-pixel ring index around the box: 0 inside, 1 on the first ring outside, ..."""
    height, width = image_dims
    rows_slice, cols_slice = bbox.pixel_slices()
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    dy = np.maximum(np.maximum(rows_slice.start - rows, rows - (rows_slice.stop - 1)), 0)
    dx = np.maximum(np.maximum(cols_slice.start - cols, cols - (cols_slice.stop - 1)), 0)
    return np.maximum(dx, dy)


def build_mask(
    bbox: BBox,
    image_dims: Tuple[int, int],
    spec: MaskSpec,
    overlap_boundary: Optional[np.ndarray] = None,
) -> BlendMask:
    """Soft mask: 1 on the box, stepping down by 1/M per ring over an M-pixel band.

    When ``overlap_boundary`` (the shared foreground) is given, mask support that
    leaves the foreground on the right or bottom side of the box centre is cut
    away, and an N-pixel band ramps the remaining values up from 0 to their prior
    value in steps of 1/N, measured radially from the cut.
    """
    height, width = image_dims
    if not bbox.within(height, width):
        raise ShapeError(f"box {bbox} lies outside a {height}x{width} image")
    M, N = spec.resolve(height, width)

    ring = chessboard_distance(bbox, image_dims)
    if M == 0:
        prior = (ring == 0).astype(np.float64)
    else:
        prior = np.clip(1.0 - ring / M, 0.0, 1.0)

    if overlap_boundary is None:
        return prior
    foreground = np.asarray(overlap_boundary, dtype=bool)
    if foreground.shape != (height, width):
        raise ShapeError(f"overlap boundary {foreground.shape} does not match image {image_dims}")

    cy = bbox.y + bbox.h / 2.0
    cx = bbox.x + bbox.w / 2.0
    rows = np.arange(height)[:, None] + 0.5
    cols = np.arange(width)[None, :] + 0.5
    clipped = (prior > 0) & ~foreground & ((cols >= cx) | (rows >= cy))
    if not clipped.any():
        return prior

    if N == 0:
        ramp = np.ones_like(prior)
    else:
        distance = ndimage.distance_transform_edt(~clipped)
        ramp = np.minimum(np.floor(distance), N) / N
    return np.where(clipped, 0.0, prior * ramp)
