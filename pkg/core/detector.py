"""Single-class dense detector: backbone, optional conjunct attention, FPN and anchor head."""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, field_validator

from utils.persistence import read_jsonl, write_csv, write_jsonl

from . import functional as F
from .attention import LEVELS, AttnConfig, Backbone, ConjunctAttention, FeaturePyramid, backbone_forward
from .base_network import BaseNetwork
from .boxes import BBox, boxes_to_array, decode_deltas, encode_deltas, iou, iou_matrix
from .exceptions import EmptyDatasetError, NonFiniteError, ShapeError
from .optim import SGD
from .rng import make_rng
from .samples import ImageSample
from .structured_logger import StructuredLogger
from .tensor import Tensor, no_grad


class DetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    use_attention: bool = True
    fpn_channels: int = Field(default=16, ge=1)
    anchor_scale_per_level: List[float] = [8.0, 16.0, 32.0, 64.0]
    positive_iou: float = 0.5
    nms_iou: float = 0.5
    score_threshold: float = 0.5
    pos_weight: float = Field(default=1.0, gt=0.0)
    smooth_l1_beta: float = Field(default=1.0, gt=0.0)
    lr: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    steps: int = Field(default=300, ge=0)
    batch_size: int = Field(default=4, ge=1)
    max_detections: int = Field(default=100, ge=1)
    log_every: int = Field(default=25, ge=1)
    seed: int = 0

    @field_validator("positive_iou", "nms_iou", "score_threshold")
    @classmethod
    def _open_unit(cls, value: float) -> float:
        if not 0.0 < value < 1.0:
            raise ValueError(f"threshold {value} must lie in (0, 1)")
        return value

    @field_validator("anchor_scale_per_level")
    @classmethod
    def _one_scale_per_level(cls, value: List[float]) -> List[float]:
        if len(value) != LEVELS or any(s <= 0 for s in value):
            raise ValueError(f"need {LEVELS} positive anchor scales, got {value}")
        return value


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    image_id: str

    def to_record(self) -> Dict:
        return {
            "image_id": self.image_id,
            "x": float(self.bbox.x),
            "y": float(self.bbox.y),
            "w": float(self.bbox.w),
            "h": float(self.bbox.h),
            "score": float(self.score),
        }

    @classmethod
    def from_record(cls, record: Dict) -> "Detection":
        return cls(BBox(record["x"], record["y"], record["w"], record["h"]), float(record["score"]), record["image_id"])


# -- network -------------------------------------------------------------------


class DetectorModel(BaseNetwork):
    """Backbone → (conjunct attention) → FPN → shared anchor head."""

    def __init__(
        self,
        config: Optional[DetectorConfig] = None,
        attn_config: Optional[AttnConfig] = None,
        image_dims: Tuple[int, int] = (80, 64),
        rng: Optional[np.random.Generator] = None,
    ):
        config = config or DetectorConfig()
        super().__init__("detector", config)
        self.attn_config = attn_config or AttnConfig()
        self.image_dims = tuple(image_dims)
        rng = rng if rng is not None else make_rng(config.seed, "detector-init")

        self.backbone = self.add_subnetwork(Backbone(self.attn_config, rng))
        self.attention = None
        if config.use_attention:
            self.attention = self.add_subnetwork(ConjunctAttention(self.attn_config, image_dims, rng))

        c, fc = self.attn_config.base_channels, config.fpn_channels
        self.laterals = [self.add_conv(f"fpn.lateral{l}", rng, (fc, c * 2 ** l, 1, 1)) for l in range(LEVELS)]
        self.smooth = [self.add_conv(f"fpn.smooth{l}", rng, (fc, fc, 3, 3)) for l in range(LEVELS)]
        self.head = {
            "shared": self.add_conv("head.shared", rng, (fc, fc, 3, 3)),
            "objectness": self.add_conv("head.objectness", rng, (1, fc, 1, 1)),
            "deltas": self.add_conv("head.deltas", rng, (4, fc, 1, 1)),
        }
        self.anchors = make_anchors(self.image_dims, config.anchor_scale_per_level)

    def features(self, images: Tensor) -> FeaturePyramid:
        if tuple(images.shape[2:]) != self.image_dims:
            raise ShapeError(f"detector built for {self.image_dims} images, got {images.shape[2:]}")
        pyramid = backbone_forward(self.backbone, images)
        if self.attention is not None:
            pyramid = self.attention.forward(pyramid)
        return pyramid

    def forward(self, images: Tensor) -> List[Tuple[Tensor, Tensor]]:
        levels = fpn_merge(self.features(images), self.laterals, self.smooth)
        return head_forward(levels, self.head)


def fpn_merge(pyr: FeaturePyramid, laterals: Sequence[Dict], smooth: Sequence[Dict]) -> FeaturePyramid:
    """Lateral 1x1 convs, top-down nearest 2x upsampling with sums, 3x3 smoothing."""
    lateral = [F.conv2d(lvl, w["weight"], w["bias"]) for lvl, w in zip(pyr.levels, laterals)]
    merged = [None] * LEVELS
    merged[-1] = lateral[-1]
    for level in range(LEVELS - 2, -1, -1):
        top_down = F.upsample_nearest(merged[level + 1], 2)
        if top_down.shape != lateral[level].shape:
            raise ShapeError(f"FPN level {level}: lateral {lateral[level].shape} vs top-down {top_down.shape}")
        merged[level] = lateral[level] + top_down
    return FeaturePyramid([F.conv2d(m, w["weight"], w["bias"], pad=1) for m, w in zip(merged, smooth)])


def head_forward(fpn_levels: FeaturePyramid, head: Dict[str, Dict]) -> List[Tuple[Tensor, Tensor]]:
    """Per level: objectness logits (N, 1, h, w) and box deltas (N, 4, h, w)."""
    outputs = []
    for level_map in fpn_levels.levels:
        shared = F.leaky_relu(F.conv2d(level_map, head["shared"]["weight"], head["shared"]["bias"], pad=1))
        objectness = F.conv2d(shared, head["objectness"]["weight"], head["objectness"]["bias"])
        deltas = F.conv2d(shared, head["deltas"]["weight"], head["deltas"]["bias"])
        outputs.append((objectness, deltas))
    return outputs


# -- anchors -------------------------------------------------------------------


def make_anchors(image_dims: Tuple[int, int], scales: Sequence[float]) -> List[np.ndarray]:
    """One square anchor per cell, centred on the cell; per level an (h·w, 4) array in row-major order."""
    height, width = image_dims
    anchors = []
    for level, scale in enumerate(scales):
        stride = 2 ** (level + 1)
        rows, cols = np.mgrid[0:height // stride, 0:width // stride]
        cx = (cols.ravel() + 0.5) * stride
        cy = (rows.ravel() + 0.5) * stride
        anchors.append(np.stack([cx - scale / 2, cy - scale / 2, np.full_like(cx, scale, dtype=np.float64),
                                 np.full_like(cy, scale, dtype=np.float64)], axis=1).astype(np.float64))
    return anchors


def match_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, positive_iou: float) -> Tuple[np.ndarray, np.ndarray]:
    """Labels (1 positive, 0 negative) and the matched gt index per anchor (-1 if none)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.zeros(len(anchors), dtype=np.int64)
    matched = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt_boxes) == 0 or len(anchors) == 0:
        return labels, matched

    overlaps = iou_matrix(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    positive = overlaps[np.arange(len(anchors)), best_gt] >= positive_iou
    labels[positive] = 1
    matched[positive] = best_gt[positive]
    for g in range(len(gt_boxes)):
        forced = int(np.argmax(overlaps[:, g]))
        labels[forced] = 1
        matched[forced] = g
    return labels, matched


# -- training ------------------------------------------------------------------


def assign_targets(
    anchors: Sequence[np.ndarray], boxes: Sequence[Sequence[BBox]], positive_iou: float
) -> Tuple[List[List[np.ndarray]], List[List[np.ndarray]]]:
    """Per level and image: anchor labels and encoded deltas of the positives.

    Matching runs over the anchors of all levels at once, so each gt gets one
    forced positive across the whole pyramid.
    """
    all_anchors = np.concatenate(anchors, axis=0)
    offsets = np.cumsum([0] + [a.shape[0] for a in anchors])
    labels = [[] for _ in anchors]
    targets = [[] for _ in anchors]
    for sample_boxes in boxes:
        gt = boxes_to_array(sample_boxes)
        sample_labels, matched = match_anchors(all_anchors, gt, positive_iou)
        for level, level_anchors in enumerate(anchors):
            lab = sample_labels[offsets[level]:offsets[level + 1]]
            idx = matched[offsets[level]:offsets[level + 1]]
            labels[level].append(lab)
            positive = lab == 1
            targets[level].append(
                encode_deltas(gt[idx[positive]], level_anchors[positive]) if positive.any() else np.zeros((0, 4))
            )
    return labels, targets


def detection_loss(
    model: DetectorModel,
    images: Tensor,
    boxes: Sequence[Sequence[BBox]],
    config: Optional[DetectorConfig] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """Class-balanced BCE over every anchor plus smooth-L1 on positive-anchor deltas.

    Positive and negative anchors are each averaged over their own count; the
    positive mean takes a ``pos_weight / (pos_weight + 1)`` share of the
    objectness term.
    """
    config = config or model.config
    outputs = model.forward(images)
    batch = images.shape[0]

    labels, targets = assign_targets(model.anchors, boxes, config.positive_iou)

    total_anchors = sum(a.shape[0] for a in model.anchors) * batch
    total_pos = sum(int(np.stack(lv).sum()) for lv in labels)
    total_neg = total_anchors - total_pos
    pos_share = config.pos_weight / (config.pos_weight + 1.0) if total_pos else 0.0
    neg_share = 1.0 - pos_share if total_neg else 0.0

    obj_loss: Optional[Tensor] = None
    box_loss: Optional[Tensor] = None
    for level, (objectness, deltas) in enumerate(outputs):
        lab = np.stack(labels[level]).astype(np.float64)  # (N, h*w)
        weights = np.where(lab == 1, pos_share / max(total_pos, 1), neg_share / max(total_neg, 1))
        logits = objectness.reshape(batch, -1)
        term = F.binary_cross_entropy_with_logits(logits, lab, weights) * float(weights.sum())
        obj_loss = term if obj_loss is None else obj_loss + term

        positives = np.flatnonzero(lab.reshape(-1) == 1)
        if positives.size:
            flat = deltas.rearrange("n c h w -> (n h w) c", h=deltas.shape[2], w=deltas.shape[3])
            target = np.concatenate(targets[level], axis=0)
            term = F.smooth_l1_loss(flat[positives], target, config.smooth_l1_beta) * (positives.size / total_pos)
            box_loss = term if box_loss is None else box_loss + term

    loss = obj_loss if box_loss is None else obj_loss + box_loss
    parts = {
        "objectness": obj_loss.item(),
        "box": 0.0 if box_loss is None else box_loss.item(),
        "anchors": total_anchors,
        "positives": total_pos,
    }
    return loss, parts


def _batch_tensor(samples: Sequence[ImageSample]) -> Tensor:
    return Tensor(np.stack([s.pixels for s in samples]))


def train_detector(
    dataset: Sequence[ImageSample],
    config: Optional[DetectorConfig] = None,
    attn_config: Optional[AttnConfig] = None,
    curve_path: Optional[Union[str, Path]] = None,
    run_id: Optional[str] = None,
) -> DetectorModel:
    """Minibatch SGD on the detection loss; batches drawn from a seeded stream per epoch."""
    config = config or DetectorConfig()
    if not dataset:
        raise EmptyDatasetError("detector training needs at least one image", error_code="EMPTY_SET")
    image_dims = dataset[0].pixels.shape[1:]
    if any(s.pixels.shape[1:] != image_dims for s in dataset):
        raise ShapeError("detector training images must share one size")

    model = DetectorModel(config, attn_config, image_dims, make_rng(config.seed, "detector-init"))
    optimizer = SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    structured = StructuredLogger()
    run_id = run_id or structured.generate_run_id()

    batch_size = min(config.batch_size, len(dataset))
    order: List[int] = []
    epoch = 0
    curve = []
    for step in range(config.steps):
        if len(order) < batch_size:
            order.extend(make_rng(config.seed, "detector-epoch", epoch).permutation(len(dataset)).tolist())
            epoch += 1
        picked = [dataset[i] for i in order[:batch_size]]
        del order[:batch_size]

        optimizer.zero_grad()
        loss, parts = detection_loss(model, _batch_tensor(picked), [s.boxes for s in picked], config)
        value = loss.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"detector loss became {value} at step {step}", error_code="NON_FINITE_LOSS")
        curve.append((step, value, parts["objectness"], parts["box"]))
        if step % config.log_every == 0:
            structured.log_training_step(run_id, "detector", step, value, box=parts["box"])
        loss.backward()
        optimizer.step()

    if curve_path is not None:
        write_csv(curve_path, ["step", "loss", "objectness", "box"], curve)
    logger.info(
        f"Trained detector for {config.steps} steps",
        extra={"images": len(dataset), "attention": config.use_attention,
               "final_loss": curve[-1][1] if curve else None},
    )
    return model


# -- inference -----------------------------------------------------------------


def nms(dets: Sequence[Detection], iou_thresh: float) -> List[Detection]:
    """Greedy suppression by descending score; ties keep the earlier detection first."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: List[Detection] = []
    for i in order:
        if all(iou(dets[i].bbox, k.bbox) <= iou_thresh for k in kept):
            kept.append(dets[i])
    return kept


def infer(
    model: DetectorModel,
    image: Union[ImageSample, np.ndarray],
    config: Optional[DetectorConfig] = None,
    image_id: Optional[str] = None,
) -> List[Detection]:
    """Scored, clipped, thresholded and suppressed detections for one image."""
    config = config or model.config
    if isinstance(image, ImageSample):
        image_id = image_id or image.id
        batch = image.tensor()
    else:
        pixels = np.asarray(image, dtype=np.float64)
        batch = Tensor(pixels.reshape(1, 1, *pixels.shape[-2:]))
    height, width = batch.shape[2:]

    with no_grad():
        outputs = model.forward(batch)

    dets: List[Detection] = []
    for (objectness, deltas), anchors in zip(outputs, model.anchors):
        scores = F.sigmoid(objectness).data.reshape(-1)
        raw = deltas.data[0].reshape(4, -1).T
        keep = np.flatnonzero(scores >= config.score_threshold)
        if not keep.size:
            continue
        decoded = decode_deltas(raw[keep], anchors[keep])
        for (x, y, w, h), score in zip(decoded, scores[keep]):
            x1, y1 = min(max(x, 0.0), width), min(max(y, 0.0), height)
            x2, y2 = min(max(x + w, 0.0), width), min(max(y + h, 0.0), height)
            if x2 - x1 <= 0 or y2 - y1 <= 0:
                continue
            dets.append(Detection(BBox(x1, y1, x2 - x1, y2 - y1), float(score), image_id or "image"))
    return nms(dets, config.nms_iou)[: config.max_detections]


def write_detections(path: Union[str, Path], detections: Sequence[Detection]) -> Path:
    return write_jsonl(path, [d.to_record() for d in detections])


def read_detections(path: Union[str, Path]) -> List[Detection]:
    return [Detection.from_record(r) for r in read_jsonl(path)]
