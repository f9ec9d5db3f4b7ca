"""Pseudo-label quality reports, deviation statistics and COCO-style average precision"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from geom import COORDS, BBox, iou, iou_matrix, paired_iou
from sample import MeanStd, normalized_deviation
from scene import PseudoDetection, Scene
from utils.errors import InvalidBoxError

IOU_BIN_WIDTH = 0.05
N_IOU_BINS = 20
CORRECT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)
COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class MetricsConfig(BaseModel):
    """Periodic evaluation of the EMA teacher on a held-out synthetic split"""

    model_config = ConfigDict(extra="forbid")

    eval_every: int = Field(250, ge=0)
    eval_scenes: int = Field(50, ge=0)
    eval_seed_offset: int = 1_000_003


@dataclass
class PseudoQualityReport:
    iou_bins: List[int] = field(default_factory=lambda: [0] * N_IOU_BINS)
    correct_at_thresh: Dict[float, int] = field(default_factory=lambda: {t: 0 for t in CORRECT_THRESHOLDS})
    count: int = 0
    mean_iou: float = 0.0
    category_accuracy: float = 0.0

    def to_dict(self) -> Dict[str, object]:
        return {
            "count": self.count,
            "mean_iou": self.mean_iou,
            "category_accuracy": self.category_accuracy,
            "iou_bins": list(self.iou_bins),
            "correct_at_thresh": {f"{t:.1f}": c for t, c in self.correct_at_thresh.items()},
        }

    def csv_rows(self, label: str) -> List[Dict[str, object]]:
        rows = [
            {"report": label, "kind": "iou_bin", "lower": round(k * IOU_BIN_WIDTH, 2), "value": n}
            for k, n in enumerate(self.iou_bins)
        ]
        rows.extend(
            {"report": label, "kind": "correct_at_thresh", "lower": t, "value": c}
            for t, c in self.correct_at_thresh.items()
        )
        return rows


def _iou_bin(value: float) -> int:
    return min(int(math.floor(value / IOU_BIN_WIDTH + 1e-9)), N_IOU_BINS - 1)


def _best_match(box: BBox, scene: Optional[Scene]) -> Tuple[float, Optional[int]]:
    """Max-IoU object of the scene (ties -> lowest object index)"""
    best_iou, best_cat = 0.0, None
    if scene is None:
        return best_iou, best_cat
    for obj in scene.objects:
        value = iou(box, obj.box)
        if best_cat is None or value > best_iou:
            best_iou, best_cat = value, obj.category
    return best_iou, best_cat


def pseudo_quality(pseudo: Sequence[PseudoDetection], scenes: Sequence[Scene]) -> PseudoQualityReport:
    """
    Histogram of matched IoU and counts of correctly categorized pseudo labels
    above each IoU threshold. Detections in scenes without objects count as IoU 0.
    """
    by_id = {s.scene_id: s for s in scenes}
    report = PseudoQualityReport()
    ious, correct = [], []
    for det in pseudo:
        value, category = _best_match(det.box, by_id.get(det.scene_id))
        right = category is not None and det.category == category
        report.iou_bins[_iou_bin(value)] += 1
        for t in CORRECT_THRESHOLDS:
            if right and value > t:
                report.correct_at_thresh[t] += 1
        ious.append(value)
        correct.append(right)
    report.count = len(ious)
    if ious:
        report.mean_iou = float(np.mean(ious))
        report.category_accuracy = float(np.mean(correct))
    return report


@dataclass
class DeviationStats:
    """IoU statistics split at 0.5 and pooled size-normalized corner deviation"""

    count: int
    iou_high: Optional[MeanStd]
    iou_low: Optional[MeanStd]
    deviation: Dict[str, MeanStd]

    def to_dict(self) -> Dict[str, object]:
        return {
            "count": self.count,
            "iou_ge_0.5": self.iou_high.to_dict() if self.iou_high else None,
            "iou_lt_0.5": self.iou_low.to_dict() if self.iou_low else None,
            "deviation": {k: v.to_dict() for k, v in self.deviation.items()},
        }

    def csv_rows(self, label: str) -> List[Dict[str, object]]:
        rows = []
        for group, stats in (("iou_ge_0.5", self.iou_high), ("iou_lt_0.5", self.iou_low)):
            if stats is not None:
                rows.append({"source": label, "quantity": group, "mean": stats.mean, "std": stats.std})
        for coord in COORDS:
            stats = self.deviation[coord]
            rows.append({"source": label, "quantity": f"dev_{coord}", "mean": stats.mean, "std": stats.std})
        return rows


def deviation_stats(pairs: Sequence[Tuple[BBox, BBox]]) -> DeviationStats:
    """Statistics over (pseudo box, ground truth box) pairs"""
    if not pairs:
        raise ValueError("deviation_stats needs at least one pair")
    pseudo = np.array([p.as_tuple() for p, _ in pairs])
    gt = np.array([g.as_tuple() for _, g in pairs])
    return deviation_stats_arrays(pseudo, gt)


def deviation_stats_arrays(pseudo: np.ndarray, gt: np.ndarray) -> DeviationStats:
    """deviation_stats for row-aligned (n, 4) pseudo and ground truth arrays"""
    if len(pseudo) == 0:
        raise ValueError("deviation_stats needs at least one pair")
    bad = ~((gt[:, 2] > gt[:, 0]) & (gt[:, 3] > gt[:, 1]) & np.all(np.isfinite(gt), axis=1))
    if np.any(bad):
        raise InvalidBoxError(f"degenerate ground truth box {tuple(gt[np.argmax(bad)])}")
    ious = paired_iou(pseudo, gt)
    high = ious[ious >= 0.5]
    low = ious[ious < 0.5]
    dev = normalized_deviation(pseudo, gt)
    return DeviationStats(
        count=len(pseudo),
        iou_high=MeanStd.of(high) if high.size else None,
        iou_low=MeanStd.of(low) if low.size else None,
        deviation={name: MeanStd.of(dev[:, k]) for k, name in enumerate(COORDS)},
    )


@dataclass
class ApResult:
    ap50: float
    ap50_95: float
    per_class: Dict[int, float]
    per_threshold: Dict[float, float]

    def to_dict(self) -> Dict[str, object]:
        return {
            "ap50": self.ap50,
            "ap50_95": self.ap50_95,
            "per_class_ap50": {str(k): v for k, v in sorted(self.per_class.items())},
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
        }


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a score-ordered TP/FP indicator"""
    if n_gt == 0 or tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    # precision envelope: best precision at any recall to the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _class_tp(
    dets: Sequence[Tuple[float, int, int, BBox]],
    gt_boxes: Mapping[int, np.ndarray],
    threshold: float,
) -> np.ndarray:
    """Greedy matching in descending score; each ground truth box is matched at most once"""
    matched = {scene_id: np.zeros(len(boxes), dtype=bool) for scene_id, boxes in gt_boxes.items()}
    tp = np.zeros(len(dets), dtype=np.int64)
    for k, (_, _, scene_id, box) in enumerate(dets):
        boxes = gt_boxes.get(scene_id)
        if boxes is None or len(boxes) == 0:
            continue
        overlaps = iou_matrix(box.to_array()[None, :], boxes)[0]
        overlaps[matched[scene_id]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= threshold:
            matched[scene_id][best] = True
            tp[k] = 1
    return tp


def average_precision(
    dets: Mapping[int, Sequence[PseudoDetection]],
    scenes: Sequence[Scene],
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
) -> ApResult:
    """
    COCO-style AP: per class and IoU threshold, greedy matching by score and
    101-point interpolation; classes without ground truth are skipped.

    `dets` maps scene id to that scene's detections, scored by `confidence`.
    """
    classes = sorted({o.category for s in scenes for o in s.objects})
    thresholds = [float(t) for t in iou_thresholds]
    if not classes:
        return ApResult(0.0, 0.0, {}, {t: 0.0 for t in thresholds})

    per_class_thr: Dict[int, Dict[float, float]] = {}
    for c in classes:
        gt_boxes = {
            s.scene_id: np.array([o.box.as_tuple() for o in s.objects if o.category == c]).reshape(-1, 4)
            for s in scenes
        }
        n_gt = sum(len(b) for b in gt_boxes.values())
        flat = [
            (d.confidence, order, scene_id, d.box)
            for scene_id, scene_dets in dets.items()
            for order, d in enumerate(scene_dets)
            if d.category == c
        ]
        # stable: ties keep scene order, then per-scene order
        flat.sort(key=lambda item: (-item[0], item[2], item[1]))
        per_class_thr[c] = {t: interpolated_ap(_class_tp(flat, gt_boxes, t), n_gt) for t in sorted({0.5, *thresholds})}

    per_threshold = {t: float(np.mean([per_class_thr[c][t] for c in classes])) for t in thresholds}
    ap50_by_class = {c: per_class_thr[c][0.5] for c in classes}
    ap50 = float(np.mean(list(ap50_by_class.values())))
    ap50_95 = float(np.mean(list(per_threshold.values())))
    return ApResult(ap50=ap50, ap50_95=ap50_95, per_class=ap50_by_class, per_threshold=per_threshold)


def matched_pairs(pseudo: Sequence[PseudoDetection], scenes: Sequence[Scene]) -> List[Tuple[BBox, BBox]]:
    """(pseudo box, max-IoU ground truth box) for every detection whose scene has objects"""
    by_id = {s.scene_id: s for s in scenes}
    pairs = []
    for det in pseudo:
        scene = by_id.get(det.scene_id)
        if scene is None or not scene.objects:
            continue
        best = max(range(len(scene.objects)), key=lambda k: (iou(det.box, scene.objects[k].box), -k))
        pairs.append((det.box, scene.objects[best].box))
    return pairs
