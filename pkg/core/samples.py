"""Image samples and their manifest records."""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .boxes import BBox
from .exceptions import ManifestError, ShapeError
from .tensor import Tensor

SPLITS = ("train", "val", "test")


@dataclass
class ImageSample:
    """Grayscale image of shape (1, H, W) in [0, 1] with optional box annotations."""

    id: str
    pixels: np.ndarray
    boxes: List[BBox] = field(default_factory=list)
    split: str = "train"
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim == 2:
            pixels = pixels[None]
        if pixels.ndim != 3 or pixels.shape[0] != 1:
            raise ShapeError(f"sample {self.id}: expected (1, H, W) pixels, got {pixels.shape}")
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ShapeError(f"sample {self.id}: pixel values outside [0, 1]")
        if self.split not in SPLITS:
            raise ManifestError(f"sample {self.id}: unknown split {self.split!r}", error_code="BAD_SPLIT")
        self.pixels = pixels
        for box in self.boxes:
            if not box.within(self.height, self.width):
                raise ShapeError(f"sample {self.id}: box {box} outside {self.height}x{self.width} image")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def is_tumor(self) -> bool:
        return bool(self.boxes)

    def image(self) -> np.ndarray:
        """(H, W) view of the pixels."""
        return self.pixels[0]

    def tensor(self) -> Tensor:
        """(1, 1, H, W) tensor for network input."""
        return Tensor(self.pixels[None])

    def to_record(self, path: str, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        record = {"id": self.id, "path": path, "split": self.split, "boxes": [b.to_record() for b in self.boxes]}
        record.update(self.meta)
        if extra:
            record.update(extra)
        return record
