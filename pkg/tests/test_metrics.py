"""Pseudo-label quality reports, deviation statistics and COCO-style AP"""

import numpy as np
import pytest

from geom import BBox, iou
from metrics import (
    CORRECT_THRESHOLDS,
    N_IOU_BINS,
    average_precision,
    deviation_stats,
    deviation_stats_arrays,
    interpolated_ap,
    matched_pairs,
    pseudo_quality,
)
from sample import UNIT_BOX, Rng, perturb_boxes
from scene import GroundTruthObject, PseudoDetection, Scene
from utils.errors import InvalidBoxError

from tests.conftest import random_box

GT = BBox(0, 0, 10, 10)


def _scene(*objects, scene_id: int = 0) -> Scene:
    return Scene(scene_id, 64, 64, tuple(GroundTruthObject(c, b) for c, b in objects))


def _det(box, category, confidence=0.9, scene_id=0):
    return PseudoDetection(box=box, category=category, confidence=confidence, scene_id=scene_id)


class TestPseudoQuality:
    def test_exact_ground_truth(self):
        scenes = [_scene((1, GT), (2, BBox(20, 20, 30, 35)))]
        pseudo = [_det(o.box, o.category) for o in scenes[0].objects]
        report = pseudo_quality(pseudo, scenes)
        assert report.iou_bins[N_IOU_BINS - 1] == 2
        assert sum(report.iou_bins) == 2
        assert all(report.correct_at_thresh[t] == 2 for t in CORRECT_THRESHOLDS)
        assert report.mean_iou == pytest.approx(1.0)
        assert report.category_accuracy == 1.0

    def test_empty(self):
        report = pseudo_quality([], [_scene((0, GT))])
        assert report.count == 0
        assert sum(report.iou_bins) == 0
        assert all(v == 0 for v in report.correct_at_thresh.values())
        assert report.mean_iou == 0.0

    def test_hand_traced_case(self):
        scenes = [_scene((1, GT))]
        pseudo = [
            _det(BBox(0, 0, 10, 9), 1),  # IoU 0.9
            _det(BBox(0, 0, 10, 6), 1),  # IoU 0.6
            _det(BBox(0, 0, 10, 3), 2),  # IoU 0.3, wrong category
        ]
        report = pseudo_quality(pseudo, scenes)
        assert report.correct_at_thresh[0.5] == 2
        assert report.correct_at_thresh[0.7] == 1
        assert report.iou_bins[18] == 1 and report.iou_bins[12] == 1 and report.iou_bins[6] == 1
        assert report.category_accuracy == pytest.approx(2 / 3)
        assert report.mean_iou == pytest.approx(0.6)

    def test_correct_counts_nonincreasing(self, np_rng):
        scenes = [_scene((k % 3, random_box(np_rng)), scene_id=k) for k in range(10)]
        pseudo = [_det(random_box(np_rng), k % 2, scene_id=k) for k in range(10) for _ in range(4)]
        report = pseudo_quality(pseudo, scenes)
        counts = [report.correct_at_thresh[t] for t in CORRECT_THRESHOLDS]
        assert counts == sorted(counts, reverse=True)
        assert sum(report.iou_bins) == len(pseudo) == report.count

    def test_scene_without_objects_counts_zero_iou(self):
        report = pseudo_quality([_det(GT, 0, scene_id=3)], [_scene(scene_id=3)])
        assert report.iou_bins[0] == 1
        assert report.category_accuracy == 0.0

    def test_to_dict_and_rows(self):
        report = pseudo_quality([_det(GT, 1)], [_scene((1, GT))])
        doc = report.to_dict()
        assert doc["correct_at_thresh"]["0.5"] == 1
        assert len(report.csv_rows("after")) == N_IOU_BINS + len(CORRECT_THRESHOLDS)


class TestDeviationStats:
    def test_exact_pairs(self):
        stats = deviation_stats([(GT, GT), (BBox(1, 2, 5, 9), BBox(1, 2, 5, 9))])
        assert stats.iou_high.mean == pytest.approx(1.0)
        assert stats.iou_high.std == pytest.approx(0.0, abs=1e-12)
        assert stats.iou_low is None
        assert all(v.mean == 0.0 and v.std == 0.0 for v in stats.deviation.values())
        assert stats.to_dict()["iou_lt_0.5"] is None

    def test_perturbed_pairs_recover_theta(self):
        pseudo = perturb_boxes(UNIT_BOX, 0.2, 40_000, Rng(12))
        gt = np.broadcast_to(UNIT_BOX.to_array(), pseudo.shape)
        stats = deviation_stats_arrays(pseudo, gt)
        for v in stats.deviation.values():
            assert v.std == pytest.approx(0.2, abs=0.005)
            assert abs(v.mean) <= 0.005
        assert stats.iou_high is not None and stats.iou_low is not None

    def test_list_form_matches_arrays(self, np_rng):
        pairs = [(random_box(np_rng), random_box(np_rng)) for _ in range(30)]
        a = deviation_stats(pairs)
        b = deviation_stats_arrays(np.array([p.as_tuple() for p, _ in pairs]), np.array([g.as_tuple() for _, g in pairs]))
        assert a == b

    def test_groups_split_at_half(self):
        stats = deviation_stats([(BBox(0, 0, 10, 5), GT), (BBox(0, 0, 10, 4), GT)])
        assert stats.iou_high.mean == pytest.approx(0.5)
        assert stats.iou_low.mean == pytest.approx(0.4)
        assert [r["quantity"] for r in stats.csv_rows("oracle")][:2] == ["iou_ge_0.5", "iou_lt_0.5"]

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            deviation_stats([])

    def test_degenerate_ground_truth_rejected(self):
        with pytest.raises(InvalidBoxError):
            deviation_stats([(GT, BBox(0, 0, 0, 5))])


def _reference_ap(dets, scenes, threshold):
    """Straightforward per-class evaluator used as the oracle"""
    classes = sorted({o.category for s in scenes for o in s.objects})
    if not classes:
        return 0.0
    recall_points = np.linspace(0.0, 1.0, 101)
    values = []
    for c in classes:
        gts = [(s.scene_id, o.box) for s in scenes for o in s.objects if o.category == c]
        used = [False] * len(gts)
        mine = sorted(
            [(d.confidence, sid, k, d) for sid, ds in dets.items() for k, d in enumerate(ds) if d.category == c],
            key=lambda item: (-item[0], item[1], item[2]),
        )
        precisions, recalls, tp = [], [], 0
        for n, (_, sid, _, d) in enumerate(mine, start=1):
            best, best_j = -1.0, None
            for j, (gsid, gbox) in enumerate(gts):
                if gsid != sid or used[j]:
                    continue
                value = iou(d.box, gbox)
                if value > best:
                    best, best_j = value, j
            if best_j is not None and best >= threshold:
                used[best_j] = True
                tp += 1
            precisions.append(tp / n)
            recalls.append(tp / len(gts))
        total = 0.0
        for r in recall_points:
            reachable = [p for p, rec in zip(precisions, recalls) if rec >= r]
            total += max(reachable) if reachable else 0.0
        values.append(total / len(recall_points))
    return float(np.mean(values))


class TestAveragePrecision:
    def test_perfect_detections(self):
        scenes = [_scene((0, GT), (1, BBox(20, 20, 40, 30)))]
        dets = {0: [_det(o.box, o.category, 1.0) for o in scenes[0].objects]}
        ap = average_precision(dets, scenes)
        assert ap.ap50 == pytest.approx(1.0)
        assert ap.ap50_95 == pytest.approx(1.0)

    def test_no_detections(self):
        ap = average_precision({}, [_scene((0, GT))])
        assert ap.ap50 == 0.0 and ap.ap50_95 == 0.0

    def test_no_ground_truth(self):
        ap = average_precision({0: [_det(GT, 0)]}, [_scene()])
        assert ap.ap50 == 0.0 and ap.per_class == {}

    def test_false_positive_after_recall_saturates(self):
        scenes = [_scene((0, GT))]
        dets = {0: [_det(BBox(0, 0, 10, 8), 0, 0.9), _det(BBox(0, 0, 10, 2), 0, 0.8)]}
        assert iou(dets[0][0].box, GT) == pytest.approx(0.8)
        assert iou(dets[0][1].box, GT) == pytest.approx(0.2)
        assert average_precision(dets, scenes, iou_thresholds=[0.5]).ap50 == pytest.approx(1.0)

    def test_false_positive_first_halves_precision(self):
        scenes = [_scene((0, GT))]
        dets = {0: [_det(BBox(30, 30, 40, 40), 0, 0.9), _det(GT, 0, 0.8)]}
        assert average_precision(dets, scenes, iou_thresholds=[0.5]).ap50 == pytest.approx(0.5)

    def test_duplicate_detection_is_false_positive(self):
        scenes = [_scene((0, GT), (0, BBox(30, 30, 40, 40)))]
        dets = {0: [_det(GT, 0, 0.9), _det(GT, 0, 0.8)]}
        tp_first = average_precision(dets, scenes, iou_thresholds=[0.5]).ap50
        # recall stops at 1/2
        assert tp_first == pytest.approx(51 / 101)

    def test_interpolated_ap_edges(self):
        assert interpolated_ap(np.array([], dtype=np.int64), 3) == 0.0
        assert interpolated_ap(np.array([1, 0]), 0) == 0.0
        assert interpolated_ap(np.array([1]), 1) == pytest.approx(1.0)

    def _random_case(self, seed: int):
        rng = np.random.default_rng(seed)
        scenes = []
        dets = {}
        for sid in range(3):
            objects = [(int(rng.integers(0, 3)), random_box(rng, max_coord=40.0)) for _ in range(int(rng.integers(0, 4)))]
            scenes.append(_scene(*objects, scene_id=sid))
            scene_dets = []
            for cat, box in objects:
                if rng.random() < 0.8:
                    jitter = rng.normal(0.0, 2.0, size=4)
                    x1, y1, x2, y2 = box.to_array() + jitter
                    if x2 - x1 > 0.5 and y2 - y1 > 0.5:
                        scene_dets.append(_det(BBox(x1, y1, x2, y2), cat, float(rng.random()), sid))
            for _ in range(int(rng.integers(0, 4))):
                scene_dets.append(_det(random_box(rng, max_coord=40.0), int(rng.integers(0, 3)), float(rng.random()), sid))
            dets[sid] = scene_dets
        return dets, scenes

    def test_matches_reference_evaluator(self):
        for seed in range(30):
            dets, scenes = self._random_case(seed)
            result = average_precision(dets, scenes, iou_thresholds=[0.5, 0.75])
            assert result.ap50 == pytest.approx(_reference_ap(dets, scenes, 0.5), abs=1e-12)
            assert result.per_threshold[0.75] == pytest.approx(_reference_ap(dets, scenes, 0.75), abs=1e-12)

    def test_invariant_to_monotone_rescaling(self):
        for seed in range(20):
            dets, scenes = self._random_case(seed)
            rescaled = {
                sid: [_det(d.box, d.category, 0.1 + 0.5 * d.confidence**3, sid) for d in ds] for sid, ds in dets.items()
            }
            a = average_precision(dets, scenes)
            b = average_precision(rescaled, scenes)
            assert a.ap50 == pytest.approx(b.ap50, abs=1e-12)
            assert a.ap50_95 == pytest.approx(b.ap50_95, abs=1e-12)

    def test_to_dict(self):
        ap = average_precision({0: [_det(GT, 0, 1.0)]}, [_scene((0, GT))])
        doc = ap.to_dict()
        assert doc["per_class_ap50"] == {"0": 1.0}
        assert set(doc["per_threshold"]) == {f"{0.5 + 0.05 * k:.2f}" for k in range(10)}


class TestMatchedPairs:
    def test_best_object_and_skips(self):
        scenes = [_scene((0, GT), (1, BBox(20, 20, 30, 30))), _scene(scene_id=1)]
        pseudo = [_det(BBox(21, 21, 30, 30), 0), _det(GT, 1, scene_id=1), _det(GT, 1, scene_id=9)]
        assert matched_pairs(pseudo, scenes) == [(BBox(21, 21, 30, 30), BBox(20, 20, 30, 30))]

    def test_ties_go_to_lowest_index(self):
        scenes = [_scene((0, BBox(20, 20, 30, 30)), (1, BBox(40, 40, 50, 50)))]
        pairs = matched_pairs([_det(GT, 0)], scenes)
        assert pairs[0][1] == BBox(20, 20, 30, 30)
