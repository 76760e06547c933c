"""Pipeline commands: synth → train-ae → translate → train-det → infer → eval, plus gradcheck and A/B runs.

Every command takes a validated ``RunConfig`` and works inside its ``output_dir``.
Commands are deterministic under the config seed; artifacts carry no timestamps.
"""

from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from utils.persistence import ArtifactStore, write_csv
from utils.phantoms import load_dataset, make_dataset, split_counts

from .attention import reference_patches_from_masks
from .autoencoder import AEModel, train_overfit
from .checkpoint import load_checkpoint
from .config_manager import RunConfig
from .detector import DetectorModel, infer, read_detections, train_detector, write_detections
from .evaluation import EvalReport, evaluate, sample_variance, write_report
from .exceptions import AcceptanceError, EmptyDatasetError
from .gradcheck import gradient_suite
from .masks import foreground_outline
from .performance_monitor import PerformanceMonitor
from .rng import make_rng
from .samples import ImageSample
from .structured_logger import StructuredLogger
from .translator import LambdaSchedule, augment_dataset

# arm -> (conjunct attention, training sources)
ARMS: Dict[str, Tuple[bool, Tuple[str, ...]]] = {
    "baseline": (False, ("real",)),
    "lit": (False, ("real", "translated")),
    "attention": (True, ("real",)),
    "replica": (True, ("real", "translated")),
    "translated_only": (True, ("translated",)),
}
AB_ARMS = ("baseline", "lit")
SUMMARY_METRICS = ("AP", "AP50", "AP75", "APm", "APl")
VARIANCE_METRICS = ("AP50", "APm")


class PipelineStage(Enum):
    """Pipeline stages."""
    SYNTH = "synth"
    TRAIN_AE = "train-ae"
    TRANSLATE = "translate"
    TRAIN_DET = "train-det"
    INFER = "infer"
    EVAL = "eval"
    GRADCHECK = "gradcheck"
    AB = "ab"
    ABLATION = "ablation"


class PipelineContext:
    """Run-scoped state shared by the commands of one invocation."""

    def __init__(
        self,
        config: RunConfig,
        run_id: Optional[str] = None,
        monitor: Optional[PerformanceMonitor] = None,
    ):
        self.config = config
        self.store = ArtifactStore(config.output_dir)
        self.structured = StructuredLogger()
        self.run_id = run_id or self.structured.generate_run_id()
        self.monitor = monitor or PerformanceMonitor(time_threshold=config.logging.stage_warn_seconds)

    @contextmanager
    def stage(self, stage: PipelineStage, **context: Any) -> Iterator[Dict[str, Any]]:
        self.structured.log_stage_event(self.run_id, "started", stage.value, **context)
        with self.monitor.track(stage.value) as metrics:
            yield metrics
        self.structured.log_stage_event(
            self.run_id, "completed", stage.value, duration_s=round(metrics["duration_s"], 3)
        )


def _context(config: RunConfig, context: Optional[PipelineContext]) -> PipelineContext:
    return context if context is not None else PipelineContext(config)


def _train_split(ctx: PipelineContext) -> List[ImageSample]:
    samples = load_dataset(ctx.store.require(ctx.store.manifest_file), split="train")
    if not samples:
        raise EmptyDatasetError("the training split is empty; rerun synth with more images", error_code="EMPTY_SET")
    return samples


def ae_training_pool(
    samples: Sequence[ImageSample], per_tumor: int = 1, balanced: bool = True
) -> Tuple[List[ImageSample], List[ImageSample]]:
    """Tumor images and the normals they may be paired with; both sorted by id.

    With ``balanced`` the normals are capped at ``max(#tumors, per_tumor)``.
    """
    tumors = sorted((s for s in samples if s.is_tumor), key=lambda s: s.id)
    normals = sorted((s for s in samples if not s.is_tumor), key=lambda s: s.id)
    if balanced:
        normals = normals[: max(len(tumors), per_tumor)]
    return tumors, normals


def lambda_schedule(config: RunConfig) -> LambdaSchedule:
    translation = config.translation
    if translation.schedule:
        return LambdaSchedule(translation.lambda_max, tuple(translation.schedule))
    return LambdaSchedule.linear(translation.lambda_max, layers=len(AEModel.LAYER_NAMES))


# -- data and translation ----------------------------------------------------------


def cmd_synth(config: RunConfig, context: Optional[PipelineContext] = None) -> Dict[str, Any]:
    """Generate the phantom dataset and its manifest."""
    ctx = _context(config, context)
    data = config.data
    with ctx.stage(PipelineStage.SYNTH, n_normal=data.n_normal, n_tumor=data.n_tumor):
        records = make_dataset(
            data.n_normal,
            data.n_tumor,
            data.splits,
            config.seed,
            ctx.store.data_dir,
            template=data.phantom,
            workers=data.workers,
        )
    counts = {split: sum(1 for r in records if r["split"] == split) for split in ("train", "val", "test")}
    return {
        "manifest": str(ctx.store.manifest_file),
        "images": len(records),
        "tumor_splits": split_counts(data.n_tumor, data.splits),
        **counts,
    }


def cmd_train_ae(config: RunConfig, context: Optional[PipelineContext] = None) -> Dict[str, Any]:
    """Overfit the autoencoder on the translation pool and save its checkpoint."""
    ctx = _context(config, context)
    tumors, normals = ae_training_pool(_train_split(ctx), config.translation.per_tumor, config.ae.balanced)
    if not tumors:
        raise EmptyDatasetError("no tumor images in the training split", error_code="NO_TUMORS")

    with ctx.stage(PipelineStage.TRAIN_AE, images=len(tumors) + len(normals)):
        model = train_overfit(
            tumors + normals,
            config.ae,
            rng=make_rng(config.seed, "ae-init"),
            curve_path=ctx.store.metrics("ae_loss.csv"),
            run_id=ctx.run_id,
        )
        path = model.save(ctx.store.checkpoint("ae"))

    status = model.status
    if not status.converged:
        logger.warning(
            f"Autoencoder did not reach L1 < {config.ae.loss_threshold}; translations may lose detail",
            extra={"final_loss": status.final_loss, "steps": status.steps},
        )
    return {
        "checkpoint": str(path),
        "status": status.label,
        "steps": status.steps,
        "final_loss": status.final_loss,
    }


def cmd_translate(config: RunConfig, context: Optional[PipelineContext] = None) -> Dict[str, Any]:
    """Translate every training tumor onto ``per_tumor`` normals and write the summary table."""
    ctx = _context(config, context)
    translation = config.translation
    tumors, normals = ae_training_pool(_train_split(ctx), translation.per_tumor, config.ae.balanced)
    if not tumors:
        raise EmptyDatasetError("no tumor images in the training split", error_code="NO_TUMORS")

    model = AEModel(config.ae)
    model.load(ctx.store.require(ctx.store.checkpoint("ae")))
    schedule = lambda_schedule(config)

    with ctx.stage(PipelineStage.TRANSLATE, tumors=len(tumors), per_tumor=translation.per_tumor):
        translated = augment_dataset(
            tumors,
            normals,
            translation.per_tumor,
            model,
            schedule,
            translation.mask,
            make_rng(config.seed, "translate"),
            out_dir=ctx.store.translated_dir,
            workers=translation.workers,
        )

    original_boxes = sum(len(s.boxes) for s in tumors)
    translated_boxes = sum(len(s.boxes) for s in translated)
    rows = [
        ("originals", len(tumors), original_boxes),
        ("translated", len(translated), translated_boxes),
        ("total", len(tumors) + len(translated), original_boxes + translated_boxes),
    ]
    write_csv(ctx.store.metrics("translation_summary.csv"), ["set", "images", "boxes"], rows)
    write_csv(
        ctx.store.metrics("reference_patches.csv"),
        ["id", "before", "after"],
        reference_patch_rows(translated, {s.id: s for s in normals}, config.attention.patch),
    )
    logger.info(
        f"{len(tumors)} originals, {len(translated)} translated, {len(tumors) + len(translated)} total",
        extra={"lambda_max": schedule.lambda_max},
    )
    return {name: {"images": images, "boxes": boxes} for name, images, boxes in rows}


def reference_patch_rows(
    translated: Sequence[ImageSample], normals: Dict[str, ImageSample], patch: Tuple[int, int]
) -> List[Tuple[str, int, int]]:
    """Reference patch counts of every translated image before and after translation."""
    rows = []
    for sample in translated:
        normal = normals[sample.meta["paired_normal_id"]]
        tumor = np.zeros(normal.pixels.shape[1:], dtype=bool)
        for box in sample.boxes:
            tumor[box.pixel_slices()] = True
        before, after = reference_patches_from_masks(
            tumor, foreground_outline(normal.pixels), foreground_outline(sample.pixels), patch
        )
        rows.append((sample.id, before, after))
    return rows


# -- detector --------------------------------------------------------------------


def _training_set(ctx: PipelineContext, sources: Sequence[str]) -> List[ImageSample]:
    dataset: List[ImageSample] = []
    if "real" in sources:
        dataset.extend(_train_split(ctx))
    if "translated" in sources:
        dataset.extend(load_dataset(ctx.store.require(ctx.store.translated_manifest_file)))
    return dataset


def _train_arm(
    ctx: PipelineContext, arm: str, seed: int, name: str, depth: Optional[int] = None
) -> Path:
    use_attention, sources = ARMS[arm]
    config = ctx.config
    det_config = config.detector.model_copy(update={"use_attention": use_attention, "seed": seed})
    attn_config = config.attention if depth is None else config.attention.model_copy(update={"depth": depth})
    dataset = _training_set(ctx, sources)

    with ctx.stage(PipelineStage.TRAIN_DET, arm=arm, seed=seed, images=len(dataset)):
        model = train_detector(
            dataset,
            det_config,
            attn_config,
            curve_path=ctx.store.metrics(f"{name}_loss.csv"),
            run_id=ctx.run_id,
        )
        return model.save(ctx.store.checkpoint(name))


def cmd_train_det(
    config: RunConfig,
    with_translation: bool = True,
    context: Optional[PipelineContext] = None,
    seed: Optional[int] = None,
) -> Dict[str, Any]:
    """Train one detector with or without the translated images.

    The arm follows ``detector.use_attention``: ``replica`` or ``attention`` with
    conjunct attention, ``lit`` or ``baseline`` without it.
    """
    ctx = _context(config, context)
    use_attention = config.detector.use_attention
    if use_attention:
        arm = "replica" if with_translation else "attention"
    else:
        arm = "lit" if with_translation else "baseline"
    name = "detector_translation" if with_translation else "detector_baseline"
    path = _train_arm(ctx, arm, config.detector.seed if seed is None else seed, name)
    return {"checkpoint": str(path), "arm": arm}


def load_detector(config: RunConfig, checkpoint: Union[str, Path], image_dims: Tuple[int, int]) -> DetectorModel:
    """Rebuild a detector from its checkpoint; attention is on iff the checkpoint holds attention weights."""
    arrays = load_checkpoint(checkpoint)
    use_attention = any(name.startswith("attention.") for name in arrays)
    blocks = {name.split(".")[1] for name in arrays if name.startswith("attention.block")}
    attn_config = config.attention
    if blocks and len(blocks) != attn_config.depth:
        attn_config = attn_config.model_copy(update={"depth": len(blocks)})
    det_config = config.detector.model_copy(update={"use_attention": use_attention})
    model = DetectorModel(det_config, attn_config, image_dims)
    model.load_state(arrays)
    return model


def cmd_infer(
    config: RunConfig,
    checkpoint: Union[str, Path],
    split: str = "val",
    out_path: Optional[Union[str, Path]] = None,
    context: Optional[PipelineContext] = None,
) -> Dict[str, Any]:
    """Run the detector on one split and write its detections as JSONL."""
    ctx = _context(config, context)
    samples = load_dataset(ctx.store.require(ctx.store.manifest_file), split=split)
    if not samples:
        raise EmptyDatasetError(f"split {split!r} is empty", error_code="EMPTY_SET")
    model = load_detector(config, ctx.store.require(checkpoint), samples[0].pixels.shape[1:])

    with ctx.stage(PipelineStage.INFER, split=split, images=len(samples)):
        detections = [d for sample in samples for d in infer(model, sample, model.config)]
    path = write_detections(out_path or ctx.store.metrics(f"detections_{split}.jsonl"), detections)
    return {"detections": str(path), "count": len(detections), "images": len(samples)}


def ground_truth(ctx: PipelineContext, split: str) -> Dict[str, list]:
    return {s.id: list(s.boxes) for s in load_dataset(ctx.store.require(ctx.store.manifest_file), split=split)}


def cmd_eval(
    config: RunConfig,
    detections: Union[str, Path],
    split: str = "val",
    context: Optional[PipelineContext] = None,
    name: Optional[str] = None,
) -> EvalReport:
    """AP metrics of a detections file against a split; writes the metrics and PR CSVs."""
    ctx = _context(config, context)
    gts = ground_truth(ctx, split)
    dets = read_detections(ctx.store.require(detections))
    name = name or split

    with ctx.stage(PipelineStage.EVAL, split=split, detections=len(dets)):
        report = evaluate(dets, gts)
    write_report(report, ctx.store.metrics(f"metrics_{name}.csv"), ctx.store.metrics(f"pr_{name}"))
    ctx.structured.log_metrics(ctx.run_id, split, report.metrics())
    return report


# -- verification --------------------------------------------------------------------


def cmd_gradcheck(config: RunConfig, context: Optional[PipelineContext] = None) -> Dict[str, float]:
    """Per-op gradient error table; raises ``AcceptanceError`` if any row reaches the tolerance."""
    ctx = _context(config, context)
    settings = config.gradcheck
    with ctx.stage(PipelineStage.GRADCHECK):
        table = gradient_suite(settings.eps, settings.max_coords, settings.seed, settings.image_size)

    rows = [(op, error, "pass" if error < settings.tolerance else "fail") for op, error in table.items()]
    write_csv(ctx.store.metrics("gradcheck.csv"), ["op", "max_rel_error", "status"], rows)
    failed = {op: error for op, error, status in rows if status == "fail"}
    if failed:
        raise AcceptanceError(
            f"gradient check failed for {', '.join(sorted(failed))} (tolerance {settings.tolerance})",
            error_code="GRADCHECK_FAILED",
            details=failed,
        )
    return table


# -- comparisons -----------------------------------------------------------------------


def _evaluate_arm(ctx: PipelineContext, arm: str, seed: int, split: str, depth: Optional[int] = None) -> Dict[str, Optional[float]]:
    tag = f"{arm}_seed{seed}" if depth is None else f"{arm}_depth{depth}_seed{seed}"
    checkpoint = _train_arm(ctx, arm, seed, f"detector_{tag}", depth=depth)
    inferred = cmd_infer(
        ctx.config, checkpoint, split, out_path=ctx.store.metrics(f"detections_{tag}.jsonl"), context=ctx
    )
    return cmd_eval(ctx.config, inferred["detections"], split, context=ctx, name=tag).metrics()


def summary_rows(arm: str, per_seed: Dict[int, Dict[str, Optional[float]]]) -> List[List[Any]]:
    """Per-seed rows followed by best, mean and sample-variance rows."""
    rows = [[arm, str(seed)] + [metrics[m] for m in SUMMARY_METRICS] for seed, metrics in per_seed.items()]
    columns = {m: [metrics[m] for metrics in per_seed.values() if metrics[m] is not None] for m in SUMMARY_METRICS}
    rows.append([arm, "best"] + [max(columns[m]) if columns[m] else None for m in SUMMARY_METRICS])
    rows.append([arm, "mean"] + [float(np.mean(columns[m])) if columns[m] else None for m in SUMMARY_METRICS])
    rows.append(
        [arm, "variance"]
        + [sample_variance(columns[m]) if m in VARIANCE_METRICS else None for m in SUMMARY_METRICS]
    )
    return rows


def _compare(
    ctx: PipelineContext,
    stage: PipelineStage,
    arms: Sequence[str],
    seeds: Sequence[int],
    split: str,
    out_name: str,
    depths: Sequence[Optional[int]] = (None,),
) -> List[List[Any]]:
    rows: List[List[Any]] = []
    with ctx.stage(stage, arms=list(arms), seeds=list(seeds)):
        for depth in depths:
            for arm in arms:
                per_seed = {seed: _evaluate_arm(ctx, arm, seed, split, depth) for seed in seeds}
                label = arm if depth is None else f"{arm}@depth{depth}"
                rows.extend(summary_rows(label, per_seed))
    write_csv(ctx.store.metrics(out_name), ["arm", "run"] + list(SUMMARY_METRICS), rows)
    return rows


def cmd_ab(
    config: RunConfig,
    seeds: Optional[Sequence[int]] = None,
    split: str = "val",
    context: Optional[PipelineContext] = None,
) -> List[List[Any]]:
    """Baseline vs translation-augmented training over several seeds (``ab_summary.csv``)."""
    ctx = _context(config, context)
    seeds = list(seeds) if seeds else list(config.ablation.seeds)
    rows = _compare(ctx, PipelineStage.AB, AB_ARMS, seeds, split, "ab_summary.csv")
    medians = {
        arm: np.median([r[3] for r in rows if r[0] == arm and r[1].isdigit() and r[3] is not None] or [np.nan])
        for arm in AB_ARMS
    }
    logger.info(
        f"Median AP50 baseline={medians['baseline']:.4f} lit={medians['lit']:.4f}",
        extra={"seeds": seeds, "lit_not_worse": bool(medians["lit"] >= medians["baseline"] - 0.02)},
    )
    return rows


def cmd_ablation(
    config: RunConfig,
    seeds: Optional[Sequence[int]] = None,
    split: str = "val",
    context: Optional[PipelineContext] = None,
) -> List[List[Any]]:
    """All configured arms, and attention depths when ``ablation.depths`` is set (``ablation_summary.csv``)."""
    ctx = _context(config, context)
    ablation = config.ablation
    seeds = list(seeds) if seeds else list(ablation.seeds)
    rows = _compare(ctx, PipelineStage.ABLATION, ablation.arms, seeds, split, "ablation_summary.csv")
    if ablation.depths:
        attention_arms = [arm for arm in ablation.arms if ARMS[arm][0]]
        rows += _compare(
            ctx, PipelineStage.ABLATION, attention_arms, seeds, split, "depth_summary.csv", depths=ablation.depths
        )
    return rows
