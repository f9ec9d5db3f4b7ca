"""
Toy teacher-student semi-supervised detection loop.

The student detector is the fixed proposal set plus a classification head and
a class-agnostic regression head over ROI features. The teacher is an EMA
copy of the student; it labels unannotated scenes, the dual polishers refine
those labels, and the refined categories and boxes supervise the student's
two heads separately.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from geom import BBox, Delta, clip, decode_delta, encode_delta_array, iou_matrix, nms_indices
from metrics import ApResult, MetricsConfig, average_precision
from net import (
    DenseNet,
    EmaPair,
    OptimizerConfig,
    OptimState,
    ema_update,
    optimizer_step,
    smooth_l1,
    softmax,
    softmax_cross_entropy,
    zero_grads,
)
from polish import (
    BoxLossKind,
    BoxPolisher,
    CategoryPolisher,
    DualPolishLearner,
    PolishNetConfig,
    fit_polishers,
    polish_categories,
    refine_detections,
)
from sample import PolishLearnConfig, Rng
from scene import (
    DatasetSplit,
    FeatureConfig,
    FeatureMap,
    ProposalConfig,
    PseudoDetection,
    Scene,
    make_split,
    roi_align_many,
)
from utils.errors import DivergenceError
from utils.logger import get_logger

logger = get_logger("SSOD")

# child streams of the run seed
STREAM_HEADS = 10
STREAM_POLISHERS = 11
STREAM_ITERATIONS = 12
STREAM_WARMUP = 13

# child streams of one iteration
ITER_ANNOTATED = 0
ITER_UNANNOTATED = 1
ITER_SUPERVISED = 2
ITER_UNSUPERVISED = 3
ITER_POLISH = 4


class HeadConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    roi_resolution: int = Field(4, ge=1)
    hidden: int = Field(64, ge=1)


class SelectionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eta: float = Field(0.5, ge=0.0, le=1.0)
    tau_cls: float = Field(0.9, ge=0.0, le=1.0)


class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lambda_u: float = Field(2.0, ge=0.0)


class AssignConfig(BaseModel):
    """ROI assignment and sampling shared by the supervised and pseudo supervised losses"""

    model_config = ConfigDict(extra="forbid")

    fg_iou: float = Field(0.5, gt=0.0, le=1.0)
    neg_ratio: int = Field(3, ge=0)
    smooth_l1_beta: float = Field(1.0 / 9.0, ge=0.0)


class SsodConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    heads: HeadConfig = Field(default_factory=HeadConfig)
    selection: SelectionConfig = Field(default_factory=SelectionConfig)
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    assign: AssignConfig = Field(default_factory=AssignConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    ema_momentum: float = Field(0.99, ge=0.0, le=1.0)
    iterations: int = Field(1500, ge=0)
    score_thresh: float = Field(0.3, ge=0.0, le=1.0)
    nms_thresh: float = Field(0.5, gt=0.0, le=1.0)
    unsup_start_iter: int = Field(0, ge=0)
    # polisher pre-training on annotated scenes before the first student step
    polish_warmup_iters: int = Field(1000, ge=0)
    log_every: int = Field(100, ge=1)


class Variant(BaseModel):
    """Ablation switches of one run"""

    model_config = ConfigDict(extra="forbid")

    no_cat_polish: bool = False
    no_box_polish: bool = False
    no_disentangle: bool = False
    loss: BoxLossKind = "giou"

    @property
    def polishing(self) -> bool:
        return not (self.no_cat_polish and self.no_box_polish)

    def slug(self) -> str:
        """Directory-safe name such as full-giou or no_cat_polish-no_disentangle-l1"""
        flags = [name for name in ("no_cat_polish", "no_box_polish", "no_disentangle") if getattr(self, name)]
        return "-".join((flags or ["full"]) + [self.loss])


@dataclass
class DetectorHeads:
    cls_head: DenseNet
    reg_head: DenseNet
    roi_resolution: int
    num_classes: int

    @classmethod
    def create(cls, cfg: HeadConfig, channels: int, num_classes: int, rng: Rng) -> "DetectorHeads":
        n_in = cfg.roi_resolution**2 * channels
        return cls(
            cls_head=DenseNet.init([n_in, cfg.hidden, num_classes + 1], rng.child(0)),
            reg_head=DenseNet.init([n_in, cfg.hidden, 4], rng.child(1)),
            roi_resolution=cfg.roi_resolution,
            num_classes=num_classes,
        )

    def params(self) -> List[np.ndarray]:
        return self.cls_head.params() + self.reg_head.params()

    def copy(self) -> "DetectorHeads":
        return DetectorHeads(self.cls_head.copy(), self.reg_head.copy(), self.roi_resolution, self.num_classes)

    def inputs(self, fmap: FeatureMap, boxes: np.ndarray) -> np.ndarray:
        rois = roi_align_many(fmap, boxes, self.roi_resolution)
        return rois.reshape(len(boxes), -1)


@dataclass
class PseudoSupervision:
    cls_set: List[Tuple[BBox, int]] = field(default_factory=list)
    reg_set: List[BBox] = field(default_factory=list)


@dataclass
class HeadLoss:
    """Loss terms with gradients aligned with DetectorHeads.params()"""

    cls_loss: float
    reg_loss: float
    grads: List[np.ndarray]

    @property
    def total(self) -> float:
        return self.cls_loss + self.reg_loss


def detect(
    heads: DetectorHeads,
    fmap: FeatureMap,
    proposals: np.ndarray,
    score_thresh: float,
    nms_thresh: float,
    scene_id: int = -1,
) -> List[PseudoDetection]:
    """
    Score every proposal, keep confident foreground, regress and clip the
    kept boxes, then suppress duplicates per category.
    """
    if len(proposals) == 0:
        raise ValueError("detect needs at least one proposal")
    x = heads.inputs(fmap, proposals)
    logits, _ = heads.cls_head.forward(x)
    fg = softmax(logits)[:, : heads.num_classes]
    categories = fg.argmax(axis=1)
    scores = fg.max(axis=1)
    keep = np.flatnonzero(scores >= score_thresh)
    if keep.size == 0:
        return []

    deltas, _ = heads.reg_head.forward(x[keep])
    boxes = [
        clip(decode_delta(BBox.from_array(proposals[i]), Delta.from_array(d)), fmap.width, fmap.height)
        for i, d in zip(keep, deltas)
    ]
    box_arr = np.array([b.as_tuple() for b in boxes])
    kept_scores = scores[keep]
    kept_cats = categories[keep]

    detections = []
    for c in np.unique(kept_cats):
        members = np.flatnonzero(kept_cats == c)
        for j in nms_indices(box_arr[members], kept_scores[members], nms_thresh):
            k = members[j]
            detections.append(
                PseudoDetection(box=boxes[k], category=int(c), confidence=float(kept_scores[k]), scene_id=scene_id)
            )
    detections.sort(key=lambda d: (-d.confidence, d.category, d.box.x1, d.box.y1))
    return detections


def select_disentangled(
    dets: Sequence[PseudoDetection],
    cat_p: Optional[CategoryPolisher],
    box_p: Optional[BoxPolisher],
    fmap: FeatureMap,
    sel: SelectionConfig,
    disentangle: bool = True,
) -> PseudoSupervision:
    """
    Split teacher detections into category and box supervision.

    Candidates are detections with confidence above eta. Every candidate's
    polished box goes to reg_set; only candidates whose polished category is
    foreground with confidence above tau_cls go to cls_set. A missing
    polisher falls back to the teacher's own box or category and confidence.
    With disentangle off, the category is polished on the polished box and
    both sets keep only the candidates passing tau_cls.
    """
    candidates = [d for d in dets if d.confidence > sel.eta]
    if not candidates:
        return PseudoSupervision()

    boxes = np.array([d.box.as_tuple() for d in candidates])
    refined, classes, confidences = refine_detections(cat_p, box_p, fmap, boxes)
    if refined is None:
        refined = [d.box for d in candidates]
    if not disentangle and cat_p is not None:
        # consecutive use: the category is judged on the polished box
        classes, probs = polish_categories(cat_p, fmap, np.array([b.as_tuple() for b in refined]))
        confidences = probs[np.arange(len(refined)), classes]
    if classes is None:
        classes = np.array([d.category for d in candidates], dtype=np.int64)
        confidences = np.array([d.confidence for d in candidates])
    background = cat_p.num_classes if cat_p is not None else -1

    passed = [i for i in range(len(candidates)) if classes[i] != background and confidences[i] > sel.tau_cls]
    cls_set = [(refined[i], int(classes[i])) for i in passed]
    reg_set = list(refined) if disentangle else [refined[i] for i in passed]
    return PseudoSupervision(cls_set=cls_set, reg_set=reg_set)


def unique_proposals(proposals: np.ndarray) -> np.ndarray:
    """Distinct rows in first-occurrence order"""
    _, first = np.unique(proposals, axis=0, return_index=True)
    return proposals[np.sort(first)]


def _classification_term(
    heads: DetectorHeads,
    fmap: FeatureMap,
    proposals: np.ndarray,
    targets: np.ndarray,
    categories: np.ndarray,
    rng: Rng,
    assign: AssignConfig,
) -> Tuple[float, List[np.ndarray]]:
    """Mean softmax-CE over positives and sampled background proposals"""
    if len(targets) == 0:
        return 0.0, zero_grads(heads.cls_head.params())
    overlaps = iou_matrix(proposals, targets)
    best = overlaps.max(axis=1)
    positive = np.flatnonzero(best >= assign.fg_iou)
    negative = np.flatnonzero(best < assign.fg_iou)
    n_neg = min(len(negative), assign.neg_ratio * max(len(positive), 1))
    chosen = negative[np.sort(rng.choice(len(negative), n_neg))] if n_neg else negative[:0]
    rows = np.concatenate([positive, chosen])
    if rows.size == 0:
        return 0.0, zero_grads(heads.cls_head.params())

    labels = np.full(len(rows), heads.num_classes, dtype=np.int64)
    labels[: len(positive)] = categories[overlaps[positive].argmax(axis=1)]
    logits, cache = heads.cls_head.forward(heads.inputs(fmap, proposals[rows]))
    loss, dlogits = softmax_cross_entropy(logits, labels)
    grads, _ = heads.cls_head.backward(cache, dlogits)
    return loss, grads


def _regression_term(
    heads: DetectorHeads,
    fmap: FeatureMap,
    proposals: np.ndarray,
    targets: np.ndarray,
    assign: AssignConfig,
) -> Tuple[float, List[np.ndarray]]:
    """Mean smooth-l1 between predicted and target deltas of positive proposals"""
    if len(targets) == 0:
        return 0.0, zero_grads(heads.reg_head.params())
    overlaps = iou_matrix(proposals, targets)
    positive = np.flatnonzero(overlaps.max(axis=1) >= assign.fg_iou)
    if positive.size == 0:
        return 0.0, zero_grads(heads.reg_head.params())

    matched = targets[overlaps[positive].argmax(axis=1)]
    wanted = encode_delta_array(proposals[positive], matched)
    out, cache = heads.reg_head.forward(heads.inputs(fmap, proposals[positive]))
    loss, dout = smooth_l1(out, wanted, assign.smooth_l1_beta)
    n = len(positive)
    grads, _ = heads.reg_head.backward(cache, dout / n)
    return loss / n, grads


def _head_loss(heads, fmap, proposals, cls_boxes, cls_cats, reg_boxes, rng, assign) -> HeadLoss:
    proposals = unique_proposals(proposals)
    cls_loss, cls_grads = _classification_term(heads, fmap, proposals, cls_boxes, cls_cats, rng, assign)
    reg_loss, reg_grads = _regression_term(heads, fmap, proposals, reg_boxes, assign)
    return HeadLoss(cls_loss, reg_loss, cls_grads + reg_grads)


def supervised_loss(
    heads: DetectorHeads,
    scene: Scene,
    fmap: FeatureMap,
    proposals: np.ndarray,
    rng: Rng,
    assign: AssignConfig = AssignConfig(),
) -> HeadLoss:
    """
    L_s on an annotated scene. Proposals with IoU >= fg_iou to an object are
    positives of their best object, the rest background; background is
    sampled up to neg_ratio per positive.
    """
    boxes = np.array([o.box.as_tuple() for o in scene.objects]).reshape(-1, 4)
    cats = np.array([o.category for o in scene.objects], dtype=np.int64)
    return _head_loss(heads, fmap, proposals, boxes, cats, boxes, rng, assign)


def unsupervised_loss(
    heads: DetectorHeads,
    fmap: FeatureMap,
    proposals: np.ndarray,
    sup: PseudoSupervision,
    rng: Rng,
    assign: AssignConfig = AssignConfig(),
) -> HeadLoss:
    """L_u: the supervised terms with cls_set as category targets and reg_set as box targets"""
    cls_boxes = np.array([b.as_tuple() for b, _ in sup.cls_set]).reshape(-1, 4)
    cls_cats = np.array([c for _, c in sup.cls_set], dtype=np.int64)
    reg_boxes = np.array([b.as_tuple() for b in sup.reg_set]).reshape(-1, 4)
    return _head_loss(heads, fmap, proposals, cls_boxes, cls_cats, reg_boxes, rng, assign)


def evaluate_heads(
    heads: DetectorHeads,
    eval_split: DatasetSplit,
    features: FeatureConfig,
    proposals: ProposalConfig,
    score_thresh: float,
    nms_thresh: float,
) -> ApResult:
    """
    Evaluation hook: AP of the heads against the sealed ground truth of a
    held-out split. Never part of a gradient path.
    """
    scenes = eval_split.sealed_ground_truth()
    dets = {}
    for view in eval_split.unlabeled_views():
        fmap = eval_split.features(view.scene_id, features)
        props = eval_split.proposals(view.scene_id, proposals)
        dets[view.scene_id] = detect(heads, fmap, props, score_thresh, nms_thresh, scene_id=view.scene_id)
    return average_precision(dets, scenes)


@dataclass
class SsodResult:
    student: DetectorHeads
    teacher: DetectorHeads
    learner: Optional[DualPolishLearner]
    history: List[Dict[str, object]]
    final_ap: Optional[ApResult]


def _eval_split(split: DatasetSplit, metrics_cfg: MetricsConfig) -> Optional[DatasetSplit]:
    if metrics_cfg.eval_scenes == 0:
        return None
    return make_split(
        0, metrics_cfg.eval_scenes, split.gen_config, split.oracle_config, split.seed + metrics_cfg.eval_seed_offset
    )


def run_ssod(
    split: DatasetSplit,
    cfg: SsodConfig,
    polish_cfg: PolishNetConfig,
    sample_cfg: PolishLearnConfig,
    features: FeatureConfig,
    proposals: ProposalConfig,
    metrics_cfg: MetricsConfig,
    seed: int,
    variant: Variant = Variant(),
    on_record: Optional[Callable[[Dict[str, object]], None]] = None,
) -> SsodResult:
    """
    Train student heads on annotated scenes plus polished pseudo labels of
    unannotated scenes, with the EMA teacher producing the labels.

    Each iteration: L_s on one annotated scene; teacher detection, selection
    and lambda_u * L_u on one unannotated scene; one dual polishing learning
    step on the annotated scene; one student step on L_s + lambda_u * L_u;
    EMA update of the teacher.

    Raises:
        DivergenceError: a loss became non-finite
    """
    if not split.annotated:
        raise ValueError("run_ssod needs at least one annotated scene")
    root = Rng(seed)
    num_classes = split.num_classes
    student = DetectorHeads.create(cfg.heads, features.channels, num_classes, root.child(STREAM_HEADS))
    teacher = student.copy()
    optimizer = OptimState.for_params(student.params(), cfg.optimizer)
    views = split.unlabeled_views()
    lambda_u = cfg.loss_weights.lambda_u

    learner = None
    if variant.polishing:
        learner = DualPolishLearner(
            polish_cfg.model_copy(update={"box_loss": variant.loss}),
            sample_cfg,
            features.channels,
            num_classes,
            root.child(STREAM_POLISHERS),
            train_category=not variant.no_cat_polish,
            train_box=not variant.no_box_polish,
        )
        fit_polishers(learner, split, features, proposals, cfg.polish_warmup_iters, root.child(STREAM_WARMUP))
    cat_p = learner.category if learner is not None and learner.train_category else None
    box_p = learner.box if learner is not None and learner.train_box else None

    eval_split = _eval_split(split, metrics_cfg)
    history: List[Dict[str, object]] = []
    logger.info(
        f"Starting {cfg.iterations} iterations, variant {variant.slug()}",
        extra={"seed": seed, "stage": "ssod"},
    )

    for it in range(cfg.iterations):
        it_rng = root.child(STREAM_ITERATIONS).child(it)
        ann_id = int(it_rng.child(ITER_ANNOTATED).integers(0, len(split.annotated)))
        scene_a = split.annotated[ann_id]
        fmap_a = split.features(scene_a.scene_id, features)
        props_a = split.proposals(scene_a.scene_id, proposals)

        sup_loss = supervised_loss(student, scene_a, fmap_a, props_a, it_rng.child(ITER_SUPERVISED), cfg.assign)
        grads = sup_loss.grads
        record: Dict[str, object] = {
            "iteration": it,
            "L_s": sup_loss.total,
            "L_u^c": 0.0,
            "L_u^r": 0.0,
            "L_pc": 0.0,
            "L_pr": 0.0,
            "n_pseudo_cls": 0,
            "n_pseudo_reg": 0,
        }

        if lambda_u > 0.0 and views and it >= cfg.unsup_start_iter:
            view = views[int(it_rng.child(ITER_UNANNOTATED).integers(0, len(views)))]
            fmap_u = split.features(view.scene_id, features)
            props_u = split.proposals(view.scene_id, proposals)
            dets = detect(teacher, fmap_u, props_u, cfg.score_thresh, cfg.nms_thresh, scene_id=view.scene_id)
            sup = select_disentangled(dets, cat_p, box_p, fmap_u, cfg.selection, disentangle=not variant.no_disentangle)
            unsup = unsupervised_loss(student, fmap_u, props_u, sup, it_rng.child(ITER_UNSUPERVISED), cfg.assign)
            grads = [g + lambda_u * gu for g, gu in zip(grads, unsup.grads)]
            record.update(
                {"L_u^c": unsup.cls_loss, "L_u^r": unsup.reg_loss, "n_pseudo_cls": len(sup.cls_set), "n_pseudo_reg": len(sup.reg_set)}
            )

        if learner is not None:
            record["L_pc"], record["L_pr"] = learner.learn_step(
                scene_a, fmap_a, props_a, it_rng.child(ITER_POLISH), iteration=it
            )

        total = record["L_s"] + lambda_u * (record["L_u^c"] + record["L_u^r"]) + record["L_pc"] + record["L_pr"]
        if not math.isfinite(total):
            raise DivergenceError(f"non-finite total loss {total}", iteration=it)
        record["L"] = total

        try:
            optimizer_step(student.params(), grads, optimizer)
        except DivergenceError as e:
            raise DivergenceError(str(e), iteration=it) from e
        ema_update(EmaPair(student.params(), teacher.params(), cfg.ema_momentum))

        if eval_split is not None and metrics_cfg.eval_every and (it + 1) % metrics_cfg.eval_every == 0:
            ap = evaluate_heads(teacher, eval_split, features, proposals, cfg.score_thresh, cfg.nms_thresh)
            record["eval"] = ap.to_dict()
            logger.info(f"Teacher AP50 {ap.ap50:.4f}, AP50:95 {ap.ap50_95:.4f}", extra={"iteration": it})

        if it % cfg.log_every == 0:
            logger.debug(
                f"L_s={record['L_s']:.4f} L_u^c={record['L_u^c']:.4f} L_u^r={record['L_u^r']:.4f} "
                f"L_pc={record['L_pc']:.4f} L_pr={record['L_pr']:.4f}",
                extra={"iteration": it},
            )
        history.append(record)
        if on_record is not None:
            on_record(record)

    final_ap = None
    if eval_split is not None:
        final_ap = evaluate_heads(teacher, eval_split, features, proposals, cfg.score_thresh, cfg.nms_thresh)
        logger.info(f"Final teacher AP50 {final_ap.ap50:.4f}, AP50:95 {final_ap.ap50_95:.4f}", extra={"seed": seed})
    return SsodResult(student=student, teacher=teacher, learner=learner, history=history, final_ap=final_ap)

