"""Seeded streams, Gaussian box perturbation, sample sets and Monte Carlo statistics"""

import numpy as np
import pytest
from pydantic import ValidationError

from geom import BBox, iou
from sample import (
    UNIT_BOX,
    PolishLearnConfig,
    Rng,
    monte_carlo_category_stats,
    monte_carlo_deviation_stats,
    monte_carlo_iou_stats,
    perturb_box,
    perturb_boxes,
    perturb_with_noise,
    sample_category_set,
    sample_regression_set,
)
from scene import GroundTruthObject
from utils.errors import InvalidBoxError, SamplingError


class TestRng:
    def test_same_seed_same_draws(self):
        np.testing.assert_array_equal(Rng(3).normal(10), Rng(3).normal(10))

    def test_child_streams_differ(self):
        root = Rng(3)
        assert not np.array_equal(root.child(0).normal(10), root.child(1).normal(10))

    def test_child_independent_of_parent_draws(self):
        a, b = Rng(3), Rng(3)
        a.normal(100)
        np.testing.assert_array_equal(a.child(5).normal(4), b.child(5).normal(4))

    def test_path(self):
        assert Rng(1).child(2).child(3).path == (0, 2, 3)


class TestPolishLearnConfig:
    def test_defaults(self):
        cfg = PolishLearnConfig()
        assert cfg.theta_cls_c < cfg.theta_cls_m
        assert cfg.tau_pos == 0.5
        assert cfg.n_prop_neg is None
        assert not cfg.margin_positives
        assert cfg.max_background_ratio == 1.0
        assert cfg.scenes_per_step == 4

    def test_rejects_non_positive_background_ratio(self):
        with pytest.raises(ValidationError):
            PolishLearnConfig(max_background_ratio=0.0)

    def test_rejects_inverted_thetas(self):
        with pytest.raises(ValidationError):
            PolishLearnConfig(theta_cls_c=0.5, theta_cls_m=0.4)

    def test_rejects_negative_theta(self):
        with pytest.raises(ValidationError):
            PolishLearnConfig(theta_reg=-0.1)

    def test_rejects_unknown_field(self):
        with pytest.raises(ValidationError):
            PolishLearnConfig(theta=0.2)


class TestPerturb:
    def test_explicit_noise(self):
        out = perturb_with_noise(UNIT_BOX, 0.2, (1.0, -1.0), (0.5, 0.0))
        np.testing.assert_allclose(out.to_array(), [0.2, -0.2, 1.1, 1.0], atol=1e-12)

    def test_noise_scales_with_extent(self):
        out = perturb_with_noise(BBox(0, 0, 10, 5), 0.1, (1.0, 1.0), (0.0, 0.0))
        np.testing.assert_allclose(out.to_array(), [1.0, 0.5, 10.0, 5.0], atol=1e-12)

    def test_zero_theta_is_identity(self):
        box = BBox(2, 3, 9, 7)
        assert perturb_box(box, 0.0, Rng(0)) == box

    def test_all_draws_valid(self):
        draws = perturb_boxes(UNIT_BOX, 1.0, 5000, Rng(11))
        assert (draws[:, 2] > draws[:, 0]).all()
        assert (draws[:, 3] > draws[:, 1]).all()

    def test_persistent_degenerate_draws_raise(self):
        class CollapsingRng:
            def normal(self, size):
                return np.tile([0.0, 0.0, -10.0, 0.0], (size[0], 1))

        with pytest.raises(SamplingError):
            perturb_boxes(UNIT_BOX, 1.0, 3, CollapsingRng())

    def test_negative_theta_rejected(self):
        with pytest.raises(ValueError):
            perturb_box(UNIT_BOX, -0.1, Rng(0))

    def test_degenerate_base_rejected(self):
        with pytest.raises(InvalidBoxError):
            perturb_box(BBox(0, 0, 0, 1), 0.1, Rng(0))

    def test_deterministic(self):
        np.testing.assert_array_equal(perturb_boxes(UNIT_BOX, 0.2, 64, Rng(9)), perturb_boxes(UNIT_BOX, 0.2, 64, Rng(9)))


def _gt(category: int = 2) -> GroundTruthObject:
    return GroundTruthObject(category=category, box=BBox(10, 10, 30, 40))


class TestCategorySet:
    def test_partition_by_tau_pos(self):
        cfg = PolishLearnConfig()
        gt = _gt()
        proposals = [BBox(0, 0, 12, 12), BBox(12, 12, 30, 40), BBox(50, 50, 60, 60)]
        samples = sample_category_set(gt, proposals, cfg, Rng(4), num_classes=5)
        for s in samples:
            if s.target == 5:
                assert iou(s.box, gt.box) < cfg.tau_pos
            else:
                assert s.target == gt.category
                assert iou(s.box, gt.box) >= cfg.tau_pos

    def test_zero_theta_keeps_every_positive(self):
        cfg = PolishLearnConfig(theta_cls_c=0.0, n_cls_m=0)
        samples = sample_category_set(_gt(), [], cfg, Rng(4), num_classes=5)
        assert len(samples) == cfg.n_cls_c
        assert all(s.target == 2 and s.box == _gt().box for s in samples)

    def test_no_low_iou_proposals_means_generated_negatives_only(self):
        cfg = PolishLearnConfig()
        gt = _gt()
        samples = sample_category_set(gt, [gt.box, gt.box.translated(1, 1)], cfg, Rng(4), num_classes=5)
        negatives = [s for s in samples if s.target == 5]
        assert gt.box not in [s.box for s in negatives]
        assert len(negatives) <= cfg.n_cls_m

    def test_proposal_negatives_capped_highest_iou_first(self):
        cfg = PolishLearnConfig(n_cls_c=0, n_cls_m=0, n_prop_neg=2)
        gt = _gt()
        far = BBox(100, 100, 110, 110)
        near = BBox(10, 10, 30, 22)  # IoU 0.4
        mid = BBox(10, 10, 30, 16)  # IoU 0.2
        samples = sample_category_set(gt, [far, mid, near], cfg, Rng(4), num_classes=5)
        assert [s.box for s in samples] == [near, mid]

    def test_array_proposals_accepted(self):
        cfg = PolishLearnConfig(n_cls_c=0, n_cls_m=0, n_prop_neg=5)
        arr = np.array([[100.0, 100.0, 110.0, 110.0]])
        samples = sample_category_set(_gt(), arr, cfg, Rng(4), num_classes=5)
        assert [s.target for s in samples] == [5]

    def test_margin_positives(self):
        gt = _gt()
        plain = sample_category_set(gt, [], PolishLearnConfig(n_cls_c=0, n_cls_m=64), Rng(3), num_classes=5)
        cfg = PolishLearnConfig(n_cls_c=0, n_cls_m=64, margin_positives=True)
        margin = sample_category_set(gt, [], cfg, Rng(3), num_classes=5)
        positives = [s for s in margin if s.target == gt.category]
        assert positives
        assert all(iou(s.box, gt.box) >= cfg.tau_pos for s in positives)
        assert [s for s in margin if s.target == 5] == plain
        assert len(positives) + len(plain) == 64

    def test_deterministic(self):
        cfg = PolishLearnConfig()
        a = sample_category_set(_gt(), [], cfg, Rng(8), num_classes=5)
        b = sample_category_set(_gt(), [], cfg, Rng(8), num_classes=5)
        assert a == b


class TestRegressionSet:
    def test_count_and_targets(self):
        cfg = PolishLearnConfig()
        pairs = sample_regression_set(_gt(), cfg, Rng(1))
        assert len(pairs) == cfg.n_reg
        assert all(p.target_box == _gt().box for p in pairs)

    def test_empty(self):
        assert sample_regression_set(_gt(), PolishLearnConfig(n_reg=0), Rng(1)) == []

    def test_zero_theta(self):
        pairs = sample_regression_set(_gt(), PolishLearnConfig(theta_reg=0.0), Rng(1))
        assert all(p.input_box == p.target_box for p in pairs)


class TestMonteCarlo:
    def test_zero_theta(self):
        stats = monte_carlo_iou_stats(0.0, 1000, seed=0)
        assert stats.mean == pytest.approx(1.0)
        assert stats.std == pytest.approx(0.0, abs=1e-12)
        dev = monte_carlo_deviation_stats(0.0, 1000, seed=0)
        assert all(v.mean == 0.0 and v.std == 0.0 for v in dev.values())

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            monte_carlo_iou_stats(0.2, 0, seed=0)

    def test_deviation_at_theta_0_2(self):
        dev = monte_carlo_deviation_stats(0.2, 100_000, seed=42)
        assert list(dev) == ["x1", "y1", "x2", "y2"]
        for v in dev.values():
            assert 0.195 <= v.std <= 0.205
            assert abs(v.mean) <= 0.005

    def test_deviation_scale_invariant(self):
        unit = monte_carlo_deviation_stats(0.2, 40_000, seed=5)
        wide = monte_carlo_deviation_stats(0.2, 40_000, seed=5, base=BBox(0, 0, 5, 2))
        for k in unit:
            assert wide[k].mean == pytest.approx(unit[k].mean, abs=1e-6)
            assert wide[k].std == pytest.approx(unit[k].std, abs=1e-6)

    def test_iou_scale_invariant(self):
        unit = monte_carlo_iou_stats(0.2, 40_000, seed=5)
        wide = monte_carlo_iou_stats(0.2, 40_000, seed=5, base=BBox(3, 1, 8, 3))
        assert wide.mean == pytest.approx(unit.mean, abs=1e-6)

    def test_thread_count_does_not_change_result(self):
        one = monte_carlo_iou_stats(0.2, 50_000, seed=3, threads=1)
        four = monte_carlo_iou_stats(0.2, 50_000, seed=3, threads=4)
        assert one == four

    def test_deterministic(self):
        assert monte_carlo_iou_stats(0.25, 30_000, seed=8) == monte_carlo_iou_stats(0.25, 30_000, seed=8)

    @pytest.mark.slow
    @pytest.mark.parametrize("theta,expected", [(0.15, 0.6387), (0.2, 0.5525), (0.25, 0.4795)])
    def test_mean_iou_reference_values(self, theta, expected):
        stats = monte_carlo_iou_stats(theta, 100_000, seed=42)
        assert stats.mean == pytest.approx(expected, abs=0.015)

    def test_mean_iou_decreases_with_theta(self):
        means = [monte_carlo_iou_stats(t, 20_000, seed=1).mean for t in (0.1, 0.2, 0.3)]
        assert means[0] > means[1] > means[2]

    def test_category_stats(self):
        stats = monte_carlo_category_stats(PolishLearnConfig(), 20_000, seed=2)
        assert 0.9 < stats.positive_retention <= 1.0
        assert stats.positive_iou.mean >= 0.5
        assert stats.negative_iou is not None and stats.negative_iou.mean < 0.5
        assert set(stats.to_dict()) == {"positive_retention", "positive_iou", "negative_retention", "negative_iou"}
