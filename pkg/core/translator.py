"""Local image translation: pair, interpolate hidden features, mask and merge."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from loguru import logger

from utils.persistence import write_jsonl
from utils.pgm import write_pgm

from .autoencoder import AEModel, _as_batch
from .boxes import BBox
from .exceptions import NoPairError, ShapeError, TranslationError
from .masks import BlendMask, MaskSpec, build_mask, foreground_outline
from .rng import make_rng
from .samples import ImageSample
from .tensor import Tensor, no_grad


@dataclass
class PairedSample:
    normal: ImageSample
    tumor: ImageSample
    bbox: BBox
    overlap: bool
    coverage: float = 1.0
    # shared foreground of both images, used to clip the mask when overlap is set
    overlap_boundary: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LambdaSchedule:
    """Per-layer interpolation weights, increasing towards the decoder output."""

    lambda_max: float
    per_layer: tuple

    def __post_init__(self):
        values = tuple(float(v) for v in self.per_layer)
        object.__setattr__(self, "per_layer", values)
        if not values:
            raise ValueError("schedule needs at least one layer")
        if self.lambda_max == 0.0:
            if any(v != 0.0 for v in values):
                raise ValueError("lambda_max=0 requires every layer weight to be 0")
            return
        if not 0.0 < self.lambda_max < 1.0:
            raise ValueError(f"lambda_max must lie in (0, 1), got {self.lambda_max}")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValueError(f"schedule {values} must be strictly increasing")
        if values[0] < 0.0 or any(v >= 1.0 for v in values):
            raise ValueError(f"schedule {values} must stay within [0, 1)")
        if values[-1] != self.lambda_max:
            raise ValueError(f"last weight {values[-1]} must equal lambda_max {self.lambda_max}")

    @classmethod
    def linear(cls, lambda_max: float, layers: int = 6) -> "LambdaSchedule":
        """λ_k = lambda_max·k/layers for k = 1..layers."""
        per_layer = tuple(lambda_max * k / layers for k in range(1, layers))
        return cls(lambda_max, per_layer + (float(lambda_max),))

    def __len__(self) -> int:
        return len(self.per_layer)


def bbox_coverage(bbox: BBox, outline: np.ndarray) -> float:
    """Fraction of the box's pixels lying on the foreground outline."""
    rows, cols = bbox.pixel_slices()
    region = outline[rows, cols]
    return float(region.mean()) if region.size else 0.0


def exits_right_or_bottom(bbox: BBox, outline: np.ndarray) -> bool:
    """True when a box pixel off the outline lies right of or below the box centre."""
    rows, cols = bbox.pixel_slices()
    outside = ~outline[rows, cols]
    r = np.arange(rows.start, rows.start + outside.shape[0])[:, None] + 0.5
    c = np.arange(cols.start, cols.start + outside.shape[1])[None, :] + 0.5
    return bool((outside & ((c >= bbox.x + bbox.w / 2.0) | (r >= bbox.y + bbox.h / 2.0))).any())


def pair_images(
    tumor: ImageSample,
    pool: Sequence[ImageSample],
    rng: np.random.Generator,
    exclude: Iterable[str] = (),
) -> PairedSample:
    """First candidate (seeded order) whose outline contains the tumor box.

    Falls back to the candidate with the largest box coverage. That pair is
    marked as overlapping only when the box leaves the outline on its right or
    bottom side.
    """
    if not tumor.boxes:
        raise TranslationError(f"tumor image {tumor.id} has no bounding box", error_code="NO_BOX")
    excluded = set(exclude)
    candidates = [s for s in pool if s.id not in excluded]
    if not candidates:
        raise NoPairError(f"no candidate normal image left for {tumor.id}", error_code="POOL_EMPTY")

    bbox = tumor.boxes[0]
    best, best_outline, best_coverage = None, None, 0.0
    for index in rng.permutation(len(candidates)):
        normal = candidates[index]
        if normal.pixels.shape != tumor.pixels.shape:
            raise ShapeError(f"pair {tumor.id}/{normal.id}: shapes {tumor.pixels.shape} and {normal.pixels.shape} differ")
        outline = foreground_outline(normal.image())
        coverage = bbox_coverage(bbox, outline)
        if coverage == 1.0:
            return PairedSample(normal=normal, tumor=tumor, bbox=bbox, overlap=False)
        if coverage > best_coverage:
            best, best_outline, best_coverage = normal, outline, coverage

    if best is None:
        raise NoPairError(
            f"box of {tumor.id} has zero foreground coverage in every candidate",
            error_code="NO_PAIR",
            details={"tumor": tumor.id, "candidates": len(candidates)},
        )
    if not exits_right_or_bottom(bbox, best_outline):
        return PairedSample(normal=best, tumor=tumor, bbox=bbox, overlap=False, coverage=best_coverage)
    shared = best_outline & foreground_outline(tumor.image())
    return PairedSample(
        normal=best, tumor=tumor, bbox=bbox, overlap=True, coverage=best_coverage, overlap_boundary=shared
    )


def progressive_translate(model: AEModel, pair: PairedSample, schedule: LambdaSchedule) -> Tensor:
    """Decode the normal image while pulling every hidden layer towards the tumor's."""
    if pair.normal.pixels.shape != pair.tumor.pixels.shape:
        raise ShapeError(f"pair shapes differ: {pair.normal.pixels.shape} vs {pair.tumor.pixels.shape}")
    if len(schedule) != len(model.layers):
        raise ValueError(f"schedule has {len(schedule)} weights for {len(model.layers)} layers")

    with no_grad():
        _, tumor_stack = model.forward(_as_batch(pair.tumor))
        mixed = _as_batch(pair.normal)
        model.check_input(mixed)
        for k, lam in enumerate(schedule.per_layer):
            mixed = model.apply_layer(k, mixed)
            if lam != 0.0:
                mixed = Tensor(mixed.data + lam * (tumor_stack[k].data - mixed.data))
    return mixed


def merge(
    normal: ImageSample,
    mixed: Union[Tensor, np.ndarray],
    mask: BlendMask,
    bbox: Optional[BBox] = None,
    sample_id: Optional[str] = None,
) -> ImageSample:
    """Per-pixel convex blend of the mixed and normal images, clamped to [0, 1]."""
    mixed = (mixed.data if isinstance(mixed, Tensor) else np.asarray(mixed, dtype=np.float64)).reshape(-1)
    base = normal.image()
    mask = np.asarray(mask, dtype=np.float64)
    if mixed.size != base.size or mask.shape != base.shape:
        raise ShapeError(f"merge: image {base.shape}, mixed {mixed.size} values, mask {mask.shape}")
    mixed = mixed.reshape(base.shape)
    blended = np.where(mask == 0.0, base, mask * mixed + (1.0 - mask) * base)
    return ImageSample(
        id=sample_id or f"{normal.id}-merged",
        pixels=np.clip(blended, 0.0, 1.0)[None],
        boxes=[bbox] if bbox is not None else [],
        split=normal.split,
    )


def translate_pair(
    model: AEModel,
    pair: PairedSample,
    schedule: LambdaSchedule,
    spec: MaskSpec,
    sample_id: str,
) -> ImageSample:
    mixed = progressive_translate(model, pair, schedule)
    dims = pair.normal.pixels.shape[1:]
    mask = build_mask(pair.bbox, dims, spec, pair.overlap_boundary if pair.overlap else None)
    sample = merge(pair.normal, mixed, mask, bbox=pair.bbox, sample_id=sample_id)
    M, N = spec.resolve(*dims)
    sample.split = pair.tumor.split
    sample.meta = {
        "source_tumor_id": pair.tumor.id,
        "paired_normal_id": pair.normal.id,
        "lambda_max": schedule.lambda_max,
        "M": M,
        "N": N,
        "overlap": pair.overlap,
    }
    return sample


def augment_dataset(
    tumors: Sequence[ImageSample],
    pool: Sequence[ImageSample],
    per_tumor: int,
    model: AEModel,
    schedule: LambdaSchedule,
    spec: MaskSpec,
    rng: np.random.Generator,
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> List[ImageSample]:
    """Translate every tumor onto ``per_tumor`` distinct normals.

    Each tumor draws from its own stream keyed by its id, so the result does not
    depend on ``workers``. With ``out_dir`` the images and ``manifest.jsonl`` are
    written there.
    """
    if per_tumor < 1:
        raise ValueError(f"per_tumor must be >= 1, got {per_tumor}")
    base_seed = int(rng.integers(0, 2**62))

    def translate_tumor(tumor: ImageSample) -> List[ImageSample]:
        tumor_rng = make_rng(base_seed, "pair", tumor.id)
        used: List[str] = []
        outputs = []
        for j in range(per_tumor):
            try:
                pair = pair_images(tumor, pool, tumor_rng, exclude=used)
            except NoPairError as e:
                raise NoPairError(
                    f"tumor {tumor.id}: {e}", error_code=e.error_code, details={"tumor": tumor.id, **e.details}
                ) from e
            used.append(pair.normal.id)
            outputs.append(translate_pair(model, pair, schedule, spec, f"translated-{tumor.id}-{j}"))
        return outputs

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        translated = [s for batch in executor.map(translate_tumor, tumors) for s in batch]

    overlaps = sum(1 for s in translated if s.meta["overlap"])
    logger.info(
        f"Translated {len(tumors)} tumor images into {len(translated)} samples",
        extra={"per_tumor": per_tumor, "overlap_pairs": overlaps, "lambda_max": schedule.lambda_max},
    )
    if out_dir is not None:
        write_translated(translated, out_dir)
    return translated


def write_translated(samples: Sequence[ImageSample], out_dir: Union[str, Path]) -> List[Dict]:
    out_dir = Path(out_dir)
    records = []
    for sample in samples:
        relative = f"images/{sample.id}.pgm"
        write_pgm(out_dir / relative, sample.pixels)
        records.append(sample.to_record(relative))
    write_jsonl(out_dir / "manifest.jsonl", records)
    return records
