"""Synthetic breast-phantom generation and dataset manifests.

A phantom is a bright half-ellipse attached to the left image border on a dark
background, with smooth texture noise; tumor phantoms add a brighter ellipse
whose tight bounding box is the annotation.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.ndimage import gaussian_filter

from core.boxes import BBox
from core.exceptions import ManifestError
from core.rng import make_rng
from core.samples import SPLITS, ImageSample

from .persistence import read_jsonl, write_jsonl
from .pgm import read_pgm, write_pgm

BACKGROUND_LEVEL = 0.02


class PhantomConfig(BaseModel):
    """Generator knobs for one phantom image."""

    model_config = ConfigDict(extra="forbid")

    size: Tuple[int, int] = (80, 64)
    tumor: bool = False
    tumor_radius: Tuple[float, float] = (3.0, 6.0)
    contrast: Tuple[float, float] = (0.25, 0.4)
    texture_amplitude: float = Field(default=0.03, ge=0.0)
    texture_sigma: float = Field(default=2.0, gt=0.0)
    foreground_level: Tuple[float, float] = (0.45, 0.6)
    semi_axis_rows: Tuple[float, float] = (0.38, 0.48)
    semi_axis_cols: Tuple[float, float] = (0.55, 0.85)
    margin: int = Field(default=1, ge=0)
    seed: int = 0

    @field_validator("tumor_radius", "contrast", "foreground_level", "semi_axis_rows", "semi_axis_cols")
    @classmethod
    def _ordered_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        if value[0] > value[1] or value[0] < 0:
            raise ValueError(f"range {value} must satisfy 0 <= low <= high")
        return value

    @model_validator(mode="after")
    def _tumor_fits(self) -> "PhantomConfig":
        height, width = self.size
        min_semi = min(self.semi_axis_rows[0] * height, self.semi_axis_cols[0] * width)
        if 2 * (self.tumor_radius[1] + self.margin) >= min_semi:
            raise ValueError("tumor radius range does not fit inside the smallest foreground ellipse")
        return self


def _geometry(config: PhantomConfig, rng: np.random.Generator) -> Dict[str, float]:
    height, width = config.size
    return {
        "cy": height / 2.0 + rng.uniform(-0.05, 0.05) * height,
        "ay": rng.uniform(*config.semi_axis_rows) * height,
        "ax": rng.uniform(*config.semi_axis_cols) * width,
        "level": rng.uniform(*config.foreground_level),
    }


def _ellipse_radius2(shape: Tuple[int, int], cy: float, cx: float, ay: float, ax: float) -> np.ndarray:
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    # pixel centres
    return ((rows + 0.5 - cy) / ay) ** 2 + ((cols + 0.5 - cx) / ax) ** 2


def _place_tumor(config: PhantomConfig, geometry: Dict[str, float], rng: np.random.Generator) -> Tuple[float, float, float, float]:
    height, width = config.size
    for _ in range(1000):
        ry, rx = rng.uniform(*config.tumor_radius, size=2)
        cy = rng.uniform(ry + config.margin, height - ry - config.margin)
        cx = rng.uniform(rx + config.margin, width - rx - config.margin)
        # every corner of the padded tumor box must sit inside the foreground ellipse
        corners = [
            (cy + sy * (ry + config.margin), cx + sx * (rx + config.margin)) for sy in (-1, 1) for sx in (-1, 1)
        ]
        if all(((r - geometry["cy"]) / geometry["ay"]) ** 2 + (c / geometry["ax"]) ** 2 <= 1.0 for r, c in corners):
            return cy, cx, ry, rx
    raise ValueError(f"could not place a tumor inside phantom with seed {config.seed}")


def make_phantom(config: PhantomConfig, sample_id: Optional[str] = None, split: str = "train") -> ImageSample:
    """Deterministic phantom for ``config.seed``."""
    height, width = config.size
    geometry = _geometry(config, make_rng(config.seed, "geometry"))
    radius2 = _ellipse_radius2(config.size, geometry["cy"], 0.0, geometry["ay"], geometry["ax"])
    inside = radius2 <= 1.0

    image = np.full(config.size, BACKGROUND_LEVEL)
    image[inside] = geometry["level"] * (1.0 - 0.35 * radius2[inside])
    if config.texture_amplitude > 0:
        noise = gaussian_filter(make_rng(config.seed, "texture").standard_normal(config.size), config.texture_sigma)
        noise /= max(noise.std(), 1e-12)
        image[inside] += config.texture_amplitude * noise[inside]

    boxes: List[BBox] = []
    if config.tumor:
        tumor_rng = make_rng(config.seed, "tumor")
        cy, cx, ry, rx = _place_tumor(config, geometry, tumor_rng)
        lesion = _ellipse_radius2(config.size, cy, cx, ry, rx) <= 1.0
        image[lesion] += tumor_rng.uniform(*config.contrast)
        rows, cols = np.nonzero(lesion)
        boxes.append(
            BBox(float(cols.min()), float(rows.min()), float(cols.max() - cols.min() + 1), float(rows.max() - rows.min() + 1))
        )

    return ImageSample(
        id=sample_id or f"phantom-{config.seed}",
        pixels=np.clip(image, 0.0, 1.0)[None],
        boxes=boxes,
        split=split,
    )


def split_counts(n: int, fractions: Sequence[float]) -> Dict[str, int]:
    """Floor every non-train split, assign the remainder to train."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions {fractions} must be three values summing to 1")
    val = int(np.floor(n * fractions[1] + 1e-9))
    test = int(np.floor(n * fractions[2] + 1e-9))
    return {"train": n - val - test, "val": val, "test": test}


def _assign_splits(n: int, fractions: Sequence[float], seed: int, group: str) -> List[str]:
    counts = split_counts(n, fractions)
    labels = ["train"] * counts["train"] + ["val"] * counts["val"] + ["test"] * counts["test"]
    order = make_rng(seed, "split", group).permutation(n)
    assigned = [""] * n
    for position, index in enumerate(order):
        assigned[index] = labels[position]
    return assigned


def make_dataset(
    n_normal: int,
    n_tumor: int,
    splits: Sequence[float],
    seed: int,
    out_dir: Union[str, Path],
    template: Optional[PhantomConfig] = None,
    workers: int = 1,
) -> List[Dict]:
    """Generate phantoms, write them as PGM and return the manifest records.

    The manifest ``manifest.jsonl`` sits in ``out_dir``; image paths are relative to it.
    """
    out_dir = Path(out_dir)
    template = template or PhantomConfig()
    jobs = []
    for group, count in (("tumor", n_tumor), ("normal", n_normal)):
        split_labels = _assign_splits(count, splits, seed, group)
        for index in range(count):
            sample_seed = int(make_rng(seed, group, index).integers(0, 2**62))
            config = template.model_copy(update={"tumor": group == "tumor", "seed": sample_seed})
            jobs.append((f"{group}-{index:04d}", config, split_labels[index]))

    def generate(job) -> Dict:
        sample_id, config, split = job
        sample = make_phantom(config, sample_id=sample_id, split=split)
        relative = f"images/{sample_id}.pgm"
        write_pgm(out_dir / relative, sample.pixels)
        return sample.to_record(relative)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        records = list(pool.map(generate, jobs))

    write_jsonl(out_dir / "manifest.jsonl", records)
    logger.info(
        f"Generated {n_tumor} tumor and {n_normal} normal phantoms",
        extra={"out_dir": str(out_dir), "seed": seed},
    )
    return records


def load_dataset(manifest_path: Union[str, Path], split: Optional[str] = None) -> List[ImageSample]:
    """Read a manifest and its images; checks files exist and boxes lie inside images."""
    manifest_path = Path(manifest_path)
    samples = []
    seen = set()
    for record in read_jsonl(manifest_path):
        if record["id"] in seen:
            raise ManifestError(f"duplicate id {record['id']!r} in {manifest_path}", error_code="DUPLICATE_ID")
        seen.add(record["id"])
        if record.get("split") not in SPLITS:
            raise ManifestError(f"record {record['id']}: bad split {record.get('split')!r}", error_code="BAD_SPLIT")
        if split is not None and record["split"] != split:
            continue
        image_path = manifest_path.parent / record["path"]
        if not image_path.exists():
            raise ManifestError(f"record {record['id']}: image {image_path} missing", error_code="MISSING_IMAGE")
        try:
            samples.append(
                ImageSample(
                    id=record["id"],
                    pixels=read_pgm(image_path),
                    boxes=[BBox.from_record(b) for b in record.get("boxes", [])],
                    split=record["split"],
                    meta={k: v for k, v in record.items() if k not in ("id", "path", "split", "boxes")},
                )
            )
        except ValueError as e:
            raise ManifestError(f"record {record['id']}: {e}", error_code="BAD_RECORD") from e
    return samples
