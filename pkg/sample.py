"""
Seeded randomness and Gaussian pseudo-label synthesis.

Boxes are perturbed corner-wise with noise scaled by the box size:

    x1' = x1 + theta * w * t1    y1' = y1 + theta * h * t2
    x2' = x2 + theta * w * t3    y2' = y2 + theta * h * t4,   t ~ N(0, I)

Positive/negative category samples and regression pairs for the polishing
networks are built from these draws, and the Monte Carlo helpers report the
IoU and deviation statistics they induce.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from geom import COORDS, EPS_BOX, BBox, boxes_to_array, paired_iou
from utils.errors import SamplingError
from utils.logger import get_logger

if TYPE_CHECKING:
    from scene import GroundTruthObject

logger = get_logger("Sample")

MAX_RESAMPLE = 100

# Draws per Monte Carlo shard; shard k always uses stream k, independent of thread count
SHARD_SIZE = 20_000

UNIT_BOX = BBox(0.0, 0.0, 1.0, 1.0)


class Rng:
    """
    Seeded generator addressed by (seed, stream path).

    `child(i)` derives an independent stream; the same (seed, path, draw
    sequence) always yields the same values within one numpy build.
    """

    def __init__(self, seed: int, stream_id: int = 0, _parent_path: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.path = _parent_path + (self.stream_id,)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def child(self, stream_id: int) -> "Rng":
        return Rng(self.seed, stream_id, self.path)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in [low, high)"""
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


class PolishLearnConfig(BaseModel):
    """Sampling hyper-parameters of dual polishing learning"""

    model_config = ConfigDict(extra="forbid")

    theta_cls_c: float = Field(0.1, ge=0.0)
    theta_cls_m: float = Field(0.4, ge=0.0)
    theta_reg: float = Field(0.2, ge=0.0)
    n_cls_c: int = Field(32, ge=0)
    n_cls_m: int = Field(32, ge=0)
    n_reg: int = Field(32, ge=0)
    tau_pos: float = Field(0.5, gt=0.0, lt=1.0)
    # None: cap proposal negatives at the number of generated negatives
    n_prop_neg: Optional[int] = Field(None, ge=0)
    # theta_cls_m draws at IoU >= tau_pos also become positives
    margin_positives: bool = False
    # background samples per foreground sample in a learner step, at most
    max_background_ratio: Optional[float] = Field(1.0, gt=0.0)
    scenes_per_step: int = Field(4, ge=1)

    @model_validator(mode="after")
    def _check_thetas(self) -> "PolishLearnConfig":
        if not self.theta_cls_c < self.theta_cls_m:
            raise ValueError("theta_cls_c must be smaller than theta_cls_m")
        return self


@dataclass(frozen=True)
class CategorySample:
    box: BBox
    target: int  # num_classes denotes background


@dataclass(frozen=True)
class RegressionSample:
    input_box: BBox
    target_box: BBox


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float

    @classmethod
    def of(cls, values: np.ndarray) -> "MeanStd":
        values = np.asarray(values, dtype=np.float64)
        return cls(mean=float(values.mean()), std=float(values.std()))

    def to_dict(self) -> Dict[str, float]:
        return {"mean": self.mean, "std": self.std}


def perturb_with_noise(box: BBox, theta: float, t_u: Sequence[float], t_d: Sequence[float]) -> BBox:
    """Perturb both corners with explicit noise vectors (no validity check)"""
    w, h = box.width, box.height
    return BBox(
        box.x1 + theta * w * t_u[0],
        box.y1 + theta * h * t_u[1],
        box.x2 + theta * w * t_d[0],
        box.y2 + theta * h * t_d[1],
    )


def perturb_boxes(base: BBox, theta: float, n: int, rng: Rng) -> np.ndarray:
    """
    Draw n perturbed copies of `base` as an (n, 4) array.

    Rows whose extent falls to EPS_BOX or below are redrawn, up to
    MAX_RESAMPLE times each.
    """
    base.validate()
    if theta < 0:
        raise ValueError(f"theta must be non-negative, got {theta}")
    origin = base.to_array()
    scale = theta * np.array([base.width, base.height, base.width, base.height])
    out = origin + scale * rng.normal((n, 4))
    for _ in range(MAX_RESAMPLE):
        bad = (out[:, 2] - out[:, 0] <= EPS_BOX) | (out[:, 3] - out[:, 1] <= EPS_BOX)
        if not bad.any():
            return out
        out[bad] = origin + scale * rng.normal((int(bad.sum()), 4))
    raise SamplingError(f"{MAX_RESAMPLE} consecutive degenerate draws at theta={theta}")


def perturb_box(box: BBox, theta: float, rng: Rng) -> BBox:
    """One Gaussian perturbation of `box` at scale `theta`"""
    return BBox.from_array(perturb_boxes(box, theta, 1, rng)[0])


def sample_category_set(
    gt: "GroundTruthObject",
    proposals: Union[Sequence[BBox], np.ndarray],
    cfg: PolishLearnConfig,
    rng: Rng,
    num_classes: int,
) -> List[CategorySample]:
    """
    Positive and background samples around one annotated object.

    Positives: theta_cls_c draws with IoU >= tau_pos, labeled with the object
    category, and with margin_positives also the theta_cls_m draws at IoU >=
    tau_pos. Negatives: theta_cls_m draws with IoU < tau_pos, plus proposals
    with IoU < tau_pos (highest IoU first, capped), labeled background.
    Callers must pass only proposals that are background for the whole scene.
    """
    pos_boxes = perturb_boxes(gt.box, cfg.theta_cls_c, cfg.n_cls_c, rng)
    neg_boxes = perturb_boxes(gt.box, cfg.theta_cls_m, cfg.n_cls_m, rng)
    gt_row = gt.box.to_array()[None, :]

    pos_iou = paired_iou(pos_boxes, np.broadcast_to(gt_row, pos_boxes.shape))
    neg_iou = paired_iou(neg_boxes, np.broadcast_to(gt_row, neg_boxes.shape))

    samples = [CategorySample(BBox.from_array(b), gt.category) for b in pos_boxes[pos_iou >= cfg.tau_pos]]
    if cfg.margin_positives:
        samples.extend(CategorySample(BBox.from_array(b), gt.category) for b in neg_boxes[neg_iou >= cfg.tau_pos])
    generated_neg = [CategorySample(BBox.from_array(b), num_classes) for b in neg_boxes[neg_iou < cfg.tau_pos]]
    samples.extend(generated_neg)

    prop_arr = proposals if isinstance(proposals, np.ndarray) else boxes_to_array(proposals)
    if len(prop_arr):
        prop_iou = paired_iou(prop_arr, np.broadcast_to(gt_row, prop_arr.shape))
        candidates = np.flatnonzero(prop_iou < cfg.tau_pos)
        candidates = candidates[np.argsort(-prop_iou[candidates], kind="stable")]
        cap = cfg.n_prop_neg if cfg.n_prop_neg is not None else len(generated_neg)
        samples.extend(CategorySample(BBox.from_array(prop_arr[i]), num_classes) for i in candidates[:cap])

    if not any(s.target != num_classes for s in samples):
        logger.debug(f"No positives retained at theta_cls_c={cfg.theta_cls_c}")
    return samples


def sample_regression_set(gt: "GroundTruthObject", cfg: PolishLearnConfig, rng: Rng) -> List[RegressionSample]:
    """N_reg (perturbed box, ground truth box) pairs at theta_reg"""
    if cfg.n_reg == 0:
        return []
    inputs = perturb_boxes(gt.box, cfg.theta_reg, cfg.n_reg, rng)
    return [RegressionSample(BBox.from_array(b), gt.box) for b in inputs]


def _sharded_draws(theta: float, n: int, seed: int, base: BBox, threads: int) -> np.ndarray:
    """All n perturbed boxes, drawn shard by shard and concatenated in shard order"""
    n_shards = max(1, math.ceil(n / SHARD_SIZE))
    root = Rng(seed)

    def draw(shard: int) -> np.ndarray:
        count = min(SHARD_SIZE, n - shard * SHARD_SIZE)
        return perturb_boxes(base, theta, count, root.child(shard))

    if threads > 1 and n_shards > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(draw, range(n_shards)))
    else:
        parts = [draw(k) for k in range(n_shards)]
    return np.concatenate(parts, axis=0)


def monte_carlo_iou_stats(theta: float, n: int, seed: int, base: BBox = UNIT_BOX, threads: int = 1) -> MeanStd:
    """Mean/std of iou(perturb_box(base, theta), base) over n draws"""
    if n < 1:
        raise ValueError("n must be >= 1")
    draws = _sharded_draws(theta, n, seed, base, threads)
    ious = paired_iou(draws, np.broadcast_to(base.to_array(), draws.shape))
    stats = MeanStd.of(ious)
    logger.debug(f"Monte Carlo IoU mean={stats.mean:.4f} std={stats.std:.4f}", extra={"theta": theta, "seed": seed})
    return stats


def normalized_deviation(pseudo: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(pseudo - gt) / gt extent per coordinate, for (n, 4) arrays"""
    w = gt[:, 2] - gt[:, 0]
    h = gt[:, 3] - gt[:, 1]
    extent = np.stack([w, h, w, h], axis=1)
    return (pseudo - gt) / extent


def monte_carlo_deviation_stats(
    theta: float, n: int, seed: int, base: BBox = UNIT_BOX, threads: int = 1
) -> Dict[str, MeanStd]:
    """Per-coordinate mean/std of size-normalized corner deviation over n draws"""
    if n < 1:
        raise ValueError("n must be >= 1")
    draws = _sharded_draws(theta, n, seed, base, threads)
    dev = normalized_deviation(draws, np.broadcast_to(base.to_array(), draws.shape))
    return {name: MeanStd.of(dev[:, k]) for k, name in enumerate(COORDS)}


@dataclass(frozen=True)
class CategorySampleStats:
    """IoU profile of category-polishing samples drawn around a box"""

    positive_retention: float
    positive_iou: Optional[MeanStd]
    negative_retention: float
    negative_iou: Optional[MeanStd]

    def to_dict(self) -> Dict[str, object]:
        return {
            "positive_retention": self.positive_retention,
            "positive_iou": self.positive_iou.to_dict() if self.positive_iou else None,
            "negative_retention": self.negative_retention,
            "negative_iou": self.negative_iou.to_dict() if self.negative_iou else None,
        }


def monte_carlo_category_stats(cfg: PolishLearnConfig, n: int, seed: int, threads: int = 1) -> CategorySampleStats:
    """
    Retention fractions and IoU stats of the positive (theta_cls_c, IoU >= tau_pos)
    and negative (theta_cls_m, IoU < tau_pos) pools on the unit box
    """
    unit = UNIT_BOX.to_array()
    pos = _sharded_draws(cfg.theta_cls_c, n, seed, UNIT_BOX, threads)
    neg = _sharded_draws(cfg.theta_cls_m, n, seed + 1, UNIT_BOX, threads)
    pos_iou = paired_iou(pos, np.broadcast_to(unit, pos.shape))
    neg_iou = paired_iou(neg, np.broadcast_to(unit, neg.shape))
    kept_pos = pos_iou[pos_iou >= cfg.tau_pos]
    kept_neg = neg_iou[neg_iou < cfg.tau_pos]
    return CategorySampleStats(
        positive_retention=kept_pos.size / n,
        positive_iou=MeanStd.of(kept_pos) if kept_pos.size else None,
        negative_retention=kept_neg.size / n,
        negative_iou=MeanStd.of(kept_neg) if kept_neg.size else None,
    )
