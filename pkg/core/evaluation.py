"""Detection metrics: greedy matching, all-point AP over IoU 0.50..0.90, size buckets."""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from utils.persistence import write_csv

from .boxes import BBox, iou
from .detector import Detection

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))
MEDIUM_AREA = (32.0 ** 2, 96.0 ** 2)
LARGE_AREA = (96.0 ** 2, math.inf)

AreaRange = Optional[Tuple[float, float]]
GroundTruth = Mapping[str, Sequence[BBox]]

__all__ = [
    "EvalReport",
    "IOU_THRESHOLDS",
    "average_precision",
    "evaluate",
    "iou",
    "match_greedy",
    "oracle_ap",
]


@dataclass
class EvalReport:
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    apm: Optional[float]
    apl: Optional[float]
    tp: int = 0
    fp: int = 0
    fn: int = 0
    pr_curves: Dict[float, List[Tuple[float, float, float]]] = field(default_factory=dict)

    def metrics(self) -> Dict[str, Optional[float]]:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75, "APm": self.apm, "APl": self.apl}


def _in_range(area: float, area_range: AreaRange) -> bool:
    if area_range is None:
        return True
    low, high = area_range
    if math.isinf(high):
        return area > low
    return low <= area <= high


def _ranked(dets: Sequence[Detection]) -> List[Detection]:
    """Descending score; equal scores keep input order."""
    return [dets[i] for i in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))]


def match_greedy(dets: Sequence[Detection], gts: Sequence[BBox], iou_thresh: float) -> List[int]:
    """Matched gt index per detection (``-1`` for a false positive).

    ``dets`` are taken in the given order; each claims the unmatched gt of highest
    IoU at or above ``iou_thresh``, lowest gt index on ties.
    """
    taken = [False] * len(gts)
    matches = []
    for det in dets:
        best, best_iou = -1, iou_thresh
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            overlap = iou(det.bbox, gt)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g, overlap
        if best >= 0:
            taken[best] = True
        matches.append(best)
    return matches


def _group(dets: Sequence[Detection]) -> Dict[str, List[Detection]]:
    grouped: Dict[str, List[Detection]] = {}
    for det in dets:
        grouped.setdefault(det.image_id, []).append(det)
    return grouped


def _flags(
    dets: Sequence[Detection], gts: GroundTruth, iou_thresh: float, area_range: AreaRange
) -> Tuple[List[Tuple[float, int, bool]], int]:
    """(score, order, is_tp) per counted detection, plus the number of gts in range.

    Detections matched to a gt outside ``area_range`` are dropped; unmatched
    ones count as false positives only when their own area is in range.
    """
    ranked = _ranked(dets)
    order = {id(d): i for i, d in enumerate(ranked)}
    n_pos = sum(1 for boxes in gts.values() for b in boxes if _in_range(b.area, area_range))
    flags = []
    for image_id, image_dets in _group(ranked).items():
        image_gts = list(gts.get(image_id, ()))
        for det, g in zip(image_dets, match_greedy(image_dets, image_gts, iou_thresh)):
            if g >= 0:
                if _in_range(image_gts[g].area, area_range):
                    flags.append((det.score, order[id(det)], True))
            elif _in_range(det.bbox.area, area_range):
                flags.append((det.score, order[id(det)], False))
    flags.sort(key=lambda f: f[1])
    return flags, n_pos


def _envelope_area(recalls: Sequence[float], precisions: Sequence[float]) -> float:
    """All-point interpolated area under the precision envelope."""
    envelope = list(precisions)
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    terms = []
    previous = 0.0
    for r, p in zip(recalls, envelope):
        terms.append((r - previous) * p)
        previous = r
    return math.fsum(terms)


def precision_recall(
    dets: Sequence[Detection], gts: GroundTruth, iou_thresh: float, area_range: AreaRange = None
) -> Tuple[List[Tuple[float, float, float]], int]:
    """(score, recall, precision) after each counted detection, and the positive count."""
    flags, n_pos = _flags(dets, gts, iou_thresh, area_range)
    points = []
    tp = fp = 0
    for score, _, is_tp in flags:
        tp += is_tp
        fp += not is_tp
        points.append((score, tp / n_pos if n_pos else 0.0, tp / (tp + fp)))
    return points, n_pos


def average_precision(
    dets: Sequence[Detection],
    gts: Union[GroundTruth, Sequence[BBox]],
    iou_thresh: float,
    area_range: AreaRange = None,
) -> Optional[float]:
    """AP at one IoU threshold; ``None`` when no gt falls in ``area_range``.

    ``gts`` may be a plain list of boxes when every detection belongs to one image.
    """
    gts = _as_mapping(dets, gts)
    points, n_pos = precision_recall(dets, gts, iou_thresh, area_range)
    if n_pos == 0:
        return None
    return _envelope_area([p[1] for p in points], [p[2] for p in points])


def _as_mapping(dets: Sequence[Detection], gts) -> GroundTruth:
    if isinstance(gts, Mapping):
        return gts
    ids = {d.image_id for d in dets} or {"image"}
    if len(ids) != 1:
        raise ValueError("a plain gt list needs detections from a single image")
    return {ids.pop(): list(gts)}


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    if not present:
        return None
    return math.fsum(present) / len(present)


def evaluate(dets: Sequence[Detection], gts: GroundTruth) -> EvalReport:
    """AP averaged over ``IOU_THRESHOLDS`` plus AP50, AP75 and the size buckets."""
    per_threshold = {t: average_precision(dets, gts, t) for t in IOU_THRESHOLDS}
    medium = [average_precision(dets, gts, t, MEDIUM_AREA) for t in IOU_THRESHOLDS]
    large = [average_precision(dets, gts, t, LARGE_AREA) for t in IOU_THRESHOLDS]

    curves = {t: precision_recall(dets, gts, t)[0] for t in IOU_THRESHOLDS}
    flags, n_pos = _flags(dets, gts, 0.5, None)
    tp = sum(1 for f in flags if f[2])
    return EvalReport(
        ap=_mean(list(per_threshold.values())),
        ap50=per_threshold[0.5],
        ap75=per_threshold[0.75],
        apm=_mean(medium),
        apl=_mean(large),
        tp=tp,
        fp=len(flags) - tp,
        fn=n_pos - tp,
        pr_curves=curves,
    )


def oracle_ap(
    dets: Sequence[Detection],
    gts: Union[GroundTruth, Sequence[BBox]],
    iou_thresh: float,
    area_range: AreaRange = None,
) -> Optional[float]:
    """Reference AP: every score cutoff re-matches its detection prefix from scratch."""
    gts = _as_mapping(dets, gts)
    ranked = _ranked(dets)
    n_pos = sum(1 for boxes in gts.values() for b in boxes if _in_range(b.area, area_range))
    if n_pos == 0:
        return None

    recalls, precisions = [], []
    previous_counted = 0
    for cutoff in range(1, len(ranked) + 1):
        prefix = ranked[:cutoff]
        tp = fp = 0
        for image_id in {d.image_id for d in prefix}:
            image_dets = [d for d in prefix if d.image_id == image_id]
            image_gts = list(gts.get(image_id, ()))
            for det, g in zip(image_dets, match_greedy(image_dets, image_gts, iou_thresh)):
                if g >= 0 and _in_range(image_gts[g].area, area_range):
                    tp += 1
                elif g < 0 and _in_range(det.bbox.area, area_range):
                    fp += 1
        if tp + fp == previous_counted:
            continue  # the cutoff's detection was dropped
        previous_counted = tp + fp
        recalls.append(tp / n_pos)
        precisions.append(tp / (tp + fp))

    area_terms = []
    for i in range(len(recalls)):
        best = max(precisions[i:])
        area_terms.append((recalls[i] - (recalls[i - 1] if i else 0.0)) * best)
    return math.fsum(area_terms)


def oracle_report(dets: Sequence[Detection], gts: GroundTruth) -> EvalReport:
    """``evaluate`` recomputed from ``oracle_ap`` alone."""
    per_threshold = {t: oracle_ap(dets, gts, t) for t in IOU_THRESHOLDS}
    return EvalReport(
        ap=_mean(list(per_threshold.values())),
        ap50=per_threshold[0.5],
        ap75=per_threshold[0.75],
        apm=_mean([oracle_ap(dets, gts, t, MEDIUM_AREA) for t in IOU_THRESHOLDS]),
        apl=_mean([oracle_ap(dets, gts, t, LARGE_AREA) for t in IOU_THRESHOLDS]),
    )


def write_report(report: EvalReport, metrics_path: Union[str, Path], curves_dir: Optional[Union[str, Path]] = None) -> Path:
    """metrics CSV (metric,value; absent buckets left empty) and one PR CSV per threshold."""
    rows = [(name, value) for name, value in report.metrics().items()]
    rows += [("TP", report.tp), ("FP", report.fp), ("FN", report.fn)]
    path = write_csv(metrics_path, ["metric", "value"], rows)
    if curves_dir is not None:
        for threshold, points in report.pr_curves.items():
            write_csv(
                Path(curves_dir) / f"pr_{threshold:.2f}.csv",
                ["rank", "score", "recall", "precision"],
                [(i + 1, s, r, p) for i, (s, r, p) in enumerate(points)],
            )
    return path


def sample_variance(values: Sequence[float]) -> Optional[float]:
    """Unbiased (n-1) variance; ``None`` below two values."""
    values = [v for v in values if v is not None]
    if len(values) < 2:
        return None
    return float(np.var(np.asarray(values, dtype=np.float64), ddof=1))
