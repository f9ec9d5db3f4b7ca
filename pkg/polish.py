"""
Pseudo-label polishing networks and dual polishing learning.

The category polisher re-predicts a box's class (K foreground classes plus
background) from its ROI feature with two fully connected layers. The box
polisher reads ROI features of the box and six context boxes around it and
predicts the delta that moves the box onto the object, through four fully
connected layers. Both are trained on boxes synthesized around annotated
objects (see sample.py).
"""

import math
from dataclasses import dataclass
from itertools import groupby
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from geom import BBox, Delta, clip, decode_delta, decode_delta_jacobian, encode_delta, giou_loss_grad
from net import DenseNet, OptimizerConfig, OptimState, optimizer_step, smooth_l1, softmax, softmax_cross_entropy
from sample import (
    CategorySample,
    PolishLearnConfig,
    RegressionSample,
    Rng,
    sample_category_set,
    sample_regression_set,
)
from scene import (
    DatasetSplit,
    FeatureConfig,
    FeatureMap,
    ProposalConfig,
    PseudoDetection,
    Scene,
    match_to_objects,
    roi_align_many,
)
from utils.errors import DivergenceError, InvalidBoxError
from utils.logger import get_logger

logger = get_logger("Polish")

N_CONTEXT_BOXES = 7

BoxLossKind = Literal["giou", "l1"]


class ContextConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gamma: float = Field(0.06, ge=0.0)


def _polisher_optimizer() -> OptimizerConfig:
    return OptimizerConfig(kind="adamw", lr=1e-3, momentum=0.9, weight_decay=1e-2)


class PolishNetConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cat_resolution: int = Field(4, ge=1)
    cat_hidden: int = Field(128, ge=1)
    box_resolution: int = Field(4, ge=1)
    box_hidden: List[int] = Field(default_factory=lambda: [128, 128, 64], min_length=3, max_length=3)
    context: ContextConfig = Field(default_factory=ContextConfig)
    cat_optimizer: OptimizerConfig = Field(default_factory=_polisher_optimizer)
    box_optimizer: OptimizerConfig = Field(default_factory=_polisher_optimizer)
    # output layer init std; the box polisher starts close to the identity refinement
    cat_output_std: float = Field(0.01, ge=0.0)
    box_output_std: float = Field(0.001, ge=0.0)
    box_loss: BoxLossKind = "giou"


def context_box_array(boxes: np.ndarray, gamma: float) -> np.ndarray:
    """(n, 4) boxes -> (n, 7, 4): original, four diagonal shifts, two centered enlargements"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    shift = gamma * np.hypot(w, h) / math.sqrt(2.0)
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0

    out = [boxes]
    for sx, sy in ((1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)):
        offset = np.stack([sx * shift, sy * shift, sx * shift, sy * shift], axis=1)
        out.append(boxes + offset)
    for t in (1, 2):
        factor = 1.0 + 2.0 * t * gamma
        half_w = w * factor / 2.0
        half_h = h * factor / 2.0
        out.append(np.stack([cx - half_w, cy - half_h, cx + half_w, cy + half_h], axis=1))
    return np.stack(out, axis=1)


def context_boxes(box: BBox, gamma: float) -> List[BBox]:
    """The 7-box context set of one box; augmented boxes may leave the image"""
    box.validate()
    return [BBox.from_array(row) for row in context_box_array(box.to_array()[None, :], gamma)[0]]


@dataclass
class CategoryPolisher:
    roi_resolution: int
    num_classes: int
    net: DenseNet

    @classmethod
    def create(cls, cfg: PolishNetConfig, channels: int, num_classes: int, rng: Rng) -> "CategoryPolisher":
        sizes = [cfg.cat_resolution**2 * channels, cfg.cat_hidden, num_classes + 1]
        return cls(cfg.cat_resolution, num_classes, DenseNet.init(sizes, rng, output_std=cfg.cat_output_std))

    def inputs(self, fmap: FeatureMap, boxes: np.ndarray) -> np.ndarray:
        rois = roi_align_many(fmap, boxes, self.roi_resolution)
        return rois.reshape(len(rois), -1)


@dataclass
class BoxPolisher:
    roi_resolution: int
    ctx: ContextConfig
    net: DenseNet

    @classmethod
    def create(cls, cfg: PolishNetConfig, channels: int, rng: Rng) -> "BoxPolisher":
        sizes = [N_CONTEXT_BOXES * cfg.box_resolution**2 * channels, *cfg.box_hidden, 4]
        return cls(cfg.box_resolution, cfg.context.model_copy(), DenseNet.init(sizes, rng, output_std=cfg.box_output_std))

    def inputs(self, fmap: FeatureMap, boxes: np.ndarray) -> np.ndarray:
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        ctx = context_box_array(boxes, self.ctx.gamma).reshape(-1, 4)
        rois = roi_align_many(fmap, ctx, self.roi_resolution)
        return rois.reshape(len(boxes), -1)


def polish_categories(p: CategoryPolisher, fmap: FeatureMap, boxes: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Batch form of polish_category: (classes (n,), probabilities (n, K+1))"""
    logits, _ = p.net.forward(p.inputs(fmap, boxes))
    probs = softmax(logits)
    return probs.argmax(axis=1), probs


def polish_category(p: CategoryPolisher, fmap: FeatureMap, box: BBox) -> Tuple[int, np.ndarray]:
    """
    Re-predicted class of the object in `box`; index num_classes is background.
    Ties go to the lowest class index.
    """
    box.validate()
    classes, probs = polish_categories(p, fmap, box.to_array()[None, :])
    return int(classes[0]), probs[0]


def polish_boxes(p: BoxPolisher, fmap: FeatureMap, boxes: np.ndarray) -> List[BBox]:
    """Batch form of polish_box"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return []
    deltas, _ = p.net.forward(p.inputs(fmap, boxes))
    return [
        clip(decode_delta(BBox.from_array(ref), Delta.from_array(d)), fmap.width, fmap.height)
        for ref, d in zip(boxes, deltas)
    ]


def polish_box(p: BoxPolisher, fmap: FeatureMap, box: BBox) -> BBox:
    """Refined box: predicted delta decoded onto `box`, clipped to the map"""
    box.validate()
    return polish_boxes(p, fmap, box.to_array()[None, :])[0]


def _stack_inputs(batch: Sequence[Tuple[object, FeatureMap]], box_of, build) -> np.ndarray:
    """Network inputs for (sample, map) pairs, running ROI extraction once per run of equal maps"""
    rows = []
    for _, group in groupby(batch, key=lambda item: id(item[1])):
        group = list(group)
        fmap = group[0][1]
        boxes = np.array([box_of(sample).as_tuple() for sample, _ in group])
        rows.append(build(fmap, boxes))
    return np.concatenate(rows, axis=0)


def category_loss_and_grads(p: CategoryPolisher, batch: Sequence[Tuple[CategorySample, FeatureMap]]):
    """Mean cross-entropy over the batch and its parameter gradients"""
    x = _stack_inputs(batch, lambda s: s.box, p.inputs)
    targets = np.array([s.target for s, _ in batch])
    logits, cache = p.net.forward(x)
    loss, dlogits = softmax_cross_entropy(logits, targets)
    grads, _ = p.net.backward(cache, dlogits)
    return loss, grads


def box_loss_and_grads(
    p: BoxPolisher,
    batch: Sequence[Tuple[RegressionSample, FeatureMap]],
    loss_kind: BoxLossKind = "giou",
):
    """
    Mean box-polishing loss and its parameter gradients.

    giou: 1 - giou(decode(input, output), target), chained through the decode
    Jacobian. l1: l1 distance between the output and the target's delta.
    """
    if loss_kind not in ("giou", "l1"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    x = _stack_inputs(batch, lambda s: s.input_box, p.inputs)
    out, cache = p.net.forward(x)
    n = len(batch)
    dout = np.zeros_like(out)
    total = 0.0
    for i, (sample, _) in enumerate(batch):
        d = Delta.from_array(out[i])
        if loss_kind == "giou":
            pred = decode_delta(sample.input_box, d)
            loss, grad_box = giou_loss_grad(pred, sample.target_box)
            dout[i] = decode_delta_jacobian(sample.input_box, d).T @ grad_box
        else:
            loss, dout[i] = smooth_l1(out[i], encode_delta(sample.input_box, sample.target_box), 0.0)
        total += loss
    grads, _ = p.net.backward(cache, dout / n)
    return total / n, grads


def _check_finite(loss: float, what: str, iteration: Optional[int]):
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite {what} loss", iteration=iteration)


def train_category_step(
    p: CategoryPolisher,
    batch: Sequence[Tuple[CategorySample, FeatureMap]],
    opt: OptimState,
    iteration: Optional[int] = None,
) -> float:
    """One optimizer step on the mean cross-entropy L_pc; returns the pre-step loss"""
    if not batch:
        raise ValueError("batch must be nonempty")
    loss, grads = category_loss_and_grads(p, batch)
    _check_finite(loss, "category polishing", iteration)
    optimizer_step(p.net.params(), grads, opt)
    return loss


def train_box_step(
    p: BoxPolisher,
    batch: Sequence[Tuple[RegressionSample, FeatureMap]],
    opt: OptimState,
    loss_kind: BoxLossKind = "giou",
    iteration: Optional[int] = None,
) -> float:
    """One optimizer step on the mean box-polishing loss L_pr; returns the pre-step loss"""
    if not batch:
        raise ValueError("batch must be nonempty")
    loss, grads = box_loss_and_grads(p, batch, loss_kind)
    _check_finite(loss, "box polishing", iteration)
    optimizer_step(p.net.params(), grads, opt)
    return loss


LearnItem = Tuple[Scene, FeatureMap, np.ndarray]


class DualPolishLearner:
    """
    Both polishers with their optimizers, trained together on annotated scenes.

    Either half can be disabled; a disabled polisher is never updated and
    contributes a zero loss.
    """

    def __init__(
        self,
        net_cfg: PolishNetConfig,
        sample_cfg: PolishLearnConfig,
        channels: int,
        num_classes: int,
        rng: Rng,
        train_category: bool = True,
        train_box: bool = True,
    ):
        self.net_cfg = net_cfg
        self.sample_cfg = sample_cfg
        self.num_classes = num_classes
        self.channels = channels
        self.category = CategoryPolisher.create(net_cfg, channels, num_classes, rng.child(0))
        self.box = BoxPolisher.create(net_cfg, channels, rng.child(1))
        self.cat_opt = OptimState.for_params(self.category.net.params(), net_cfg.cat_optimizer)
        self.box_opt = OptimState.for_params(self.box.net.params(), net_cfg.box_optimizer)
        self.train_category = train_category
        self.train_box = train_box

    def category_batch(self, scene: Scene, fmap: FeatureMap, proposals: np.ndarray, rng: Rng):
        """
        Category samples of every object; proposals overlapping any object by
        tau_pos or more are excluded. Background samples beyond
        max_background_ratio per positive are dropped at random.
        """
        best, _ = match_to_objects(proposals, scene.objects)
        background = proposals[best < self.sample_cfg.tau_pos]
        batch = []
        for k, obj in enumerate(scene.objects):
            samples = sample_category_set(obj, background, self.sample_cfg, rng.child(k), self.num_classes)
            batch.extend((s, fmap) for s in samples)
        return self._cap_background(batch, rng.child(len(scene.objects)))

    def _cap_background(self, batch, rng: Rng):
        ratio = self.sample_cfg.max_background_ratio
        if ratio is None:
            return batch
        bg = [i for i, (s, _) in enumerate(batch) if s.target == self.num_classes]
        n_pos = len(batch) - len(bg)
        cap = int(math.ceil(ratio * max(n_pos, 1)))
        if len(bg) <= cap:
            return batch
        dropped = set(bg) - {bg[i] for i in rng.choice(len(bg), cap)}
        return [item for i, item in enumerate(batch) if i not in dropped]

    def regression_batch(self, scene: Scene, fmap: FeatureMap, rng: Rng):
        batch = []
        for k, obj in enumerate(scene.objects):
            batch.extend((s, fmap) for s in sample_regression_set(obj, self.sample_cfg, rng.child(k)))
        return batch

    def learn_batch(
        self,
        items: Sequence[LearnItem],
        rng: Rng,
        iteration: Optional[int] = None,
    ) -> Tuple[float, float]:
        """
        One dual polishing learning step on samples pooled over several annotated scenes.

        Returns:
            Tuple of (L_pc, L_pr)
        """
        loss_pc = loss_pr = 0.0
        if self.train_category:
            cat_rng = rng.child(0)
            batch = []
            for j, (scene, fmap, proposals) in enumerate(items):
                batch.extend(self.category_batch(scene, fmap, proposals, cat_rng.child(j)))
            if batch:
                loss_pc = train_category_step(self.category, batch, self.cat_opt, iteration)
        if self.train_box:
            reg_rng = rng.child(1)
            batch = []
            for j, (scene, fmap, _) in enumerate(items):
                batch.extend(self.regression_batch(scene, fmap, reg_rng.child(j)))
            if batch:
                loss_pr = train_box_step(self.box, batch, self.box_opt, self.net_cfg.box_loss, iteration)
        return loss_pc, loss_pr

    def learn_step(
        self,
        scene: Scene,
        fmap: FeatureMap,
        proposals: np.ndarray,
        rng: Rng,
        iteration: Optional[int] = None,
    ) -> Tuple[float, float]:
        """One dual polishing learning step on a single annotated scene; returns (L_pc, L_pr)"""
        return self.learn_batch([(scene, fmap, proposals)], rng, iteration)


def refine_detections(
    cat_p: Optional[CategoryPolisher],
    box_p: Optional[BoxPolisher],
    fmap: FeatureMap,
    boxes: np.ndarray,
) -> Tuple[Optional[List[BBox]], Optional[np.ndarray], Optional[np.ndarray]]:
    """
    Polished boxes, categories and category confidences for a batch of pseudo boxes.

    A missing polisher yields None for its outputs.
    """
    if len(boxes) == 0:
        return [], np.zeros(0, dtype=np.int64), np.zeros(0)
    for row in boxes:
        if not (row[2] > row[0] and row[3] > row[1]):
            raise InvalidBoxError(f"degenerate pseudo box {tuple(row)}")
    refined = polish_boxes(box_p, fmap, boxes) if box_p is not None else None
    classes = confidences = None
    if cat_p is not None:
        classes, probs = polish_categories(cat_p, fmap, boxes)
        confidences = probs[np.arange(len(boxes)), classes]
    return refined, classes, confidences


def fit_polishers(
    learner: DualPolishLearner,
    split: DatasetSplit,
    features: FeatureConfig,
    proposals: ProposalConfig,
    iterations: int,
    rng: Rng,
    on_step: Optional[Callable[[int, float, float], None]] = None,
):
    """
    Dual polishing learning: every iteration draws scenes_per_step distinct
    annotated scenes and synthesizes fresh samples around their objects.
    """
    if iterations and not split.annotated:
        raise ValueError("polisher training needs annotated scenes")
    per_step = min(learner.sample_cfg.scenes_per_step, len(split.annotated))
    for it in range(iterations):
        step_rng = rng.child(it)
        picks = sorted(int(i) for i in step_rng.child(0).choice(len(split.annotated), per_step))
        items = []
        for i in picks:
            scene = split.annotated[i]
            items.append((scene, split.features(scene.scene_id, features), split.proposals(scene.scene_id, proposals)))
        loss_pc, loss_pr = learner.learn_batch(items, step_rng.child(1), iteration=it)
        if on_step is not None:
            on_step(it, loss_pc, loss_pr)
    if iterations:
        logger.info(
            f"Trained polishers for {iterations} iterations on {per_step} scenes per step",
            extra={"stage": "polish"},
        )


def polish_oracle_detections(
    split: DatasetSplit,
    scene_ids: Sequence[int],
    cat_p: Optional[CategoryPolisher],
    box_p: Optional[BoxPolisher],
    features: FeatureConfig,
) -> Tuple[List[PseudoDetection], List[PseudoDetection]]:
    """
    Oracle teacher labels of the given scenes before and after polishing.

    A polished label takes the most probable foreground class and that
    class's probability as confidence; a background verdict only lowers the
    confidence. A missing polisher leaves its half of every label unchanged.
    """
    before: List[PseudoDetection] = []
    after: List[PseudoDetection] = []
    for scene_id in scene_ids:
        dets = split.oracle_labels(scene_id)
        before.extend(dets)
        if not dets:
            continue
        fmap = split.features(scene_id, features)
        boxes = np.array([d.box.as_tuple() for d in dets])
        refined, _, _ = refine_detections(None, box_p, fmap, boxes)
        classes = confidences = None
        if cat_p is not None:
            _, probs = polish_categories(cat_p, fmap, boxes)
            classes = probs[:, : cat_p.num_classes].argmax(axis=1)
            confidences = probs[np.arange(len(dets)), classes]
        for k, det in enumerate(dets):
            after.append(
                PseudoDetection(
                    box=refined[k] if refined is not None else det.box,
                    category=int(classes[k]) if classes is not None else det.category,
                    confidence=float(confidences[k]) if confidences is not None else det.confidence,
                    scene_id=scene_id,
                )
            )
    return before, after
