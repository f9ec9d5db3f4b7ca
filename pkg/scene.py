"""Synthetic detection world: scenes, feature maps, ROI extraction, proposals and a noisy teacher oracle"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from geom import EPS_BOX, BBox, clip, iou, iou_matrix
from sample import Rng, perturb_box, perturb_boxes
from utils.errors import InvalidBoxError
from utils.logger import get_logger

logger = get_logger("Scene")

# Stream ids under a split seed; each scene then derives its own child stream
STREAM_SCENE = 0
STREAM_RENDER = 1
STREAM_PROPOSALS = 2
STREAM_ORACLE = 3

FLIP_CONFIDENCE_PENALTY = 0.2

SPLIT_FORMAT = "polish-sim-split"
SPLIT_VERSION = 1


class SceneGenConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    width: int = Field(96, ge=16)
    height: int = Field(96, ge=16)
    num_classes: int = Field(8, ge=2)
    max_objects: int = Field(3, ge=1)
    min_object_size: float = Field(16.0, ge=8.0)
    max_object_size: float = 40.0
    overlap_cap: float = Field(0.3, ge=0.0, le=1.0)
    max_attempts: int = Field(1000, ge=1)

    @model_validator(mode="after")
    def _check_sizes(self) -> "SceneGenConfig":
        if self.max_object_size < self.min_object_size:
            raise ValueError("max_object_size must be >= min_object_size")
        if self.max_object_size > min(self.width, self.height):
            raise ValueError("max_object_size must fit inside the scene")
        return self


class FeatureConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channels: int = Field(8, ge=4)
    sigma_ctx: float = Field(0.2, gt=0.0)
    feat_noise: float = Field(0.05, ge=0.0)
    signature_seed: int = 20220


class AnchorLevel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    stride: float = Field(..., gt=0.0)
    sizes: List[float]


class ProposalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    levels: List[AnchorLevel] = Field(
        default_factory=lambda: [
            AnchorLevel(stride=4, sizes=[16.0, 20.0]),
            AnchorLevel(stride=8, sizes=[25.0, 32.0, 40.0]),
        ]
    )
    # height/width ratios
    ratios: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    n_jitter: int = Field(8, ge=0)
    theta_prop: float = Field(0.5, ge=0.0)


class TeacherOracleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    theta_noise: float = Field(0.2, ge=0.0)
    flip_rate: float = Field(0.15, ge=0.0, le=1.0)
    conf_slope: float = 8.0
    conf_offset: float = 0.5
    conf_noise_std: float = Field(0.1, ge=0.0)
    miss_rate: float = Field(0.0, ge=0.0, le=1.0)


@dataclass(frozen=True)
class GroundTruthObject:
    category: int
    box: BBox


@dataclass(frozen=True)
class Scene:
    scene_id: int
    width: int
    height: int
    objects: Tuple[GroundTruthObject, ...]


@dataclass(frozen=True)
class UnlabeledScene:
    """What training code may see of an unannotated scene"""

    scene_id: int
    width: int
    height: int


@dataclass(frozen=True)
class PseudoDetection:
    box: BBox
    category: int
    confidence: float
    scene_id: int = -1


@dataclass(eq=False)
class FeatureMap:
    """Dense C x H x W features; value[c, i, j] is the feature at point (x=j, y=i)"""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"feature map must be C x H x W, got shape {self.values.shape}")
        # H x W x C view for gathers
        self._hwc = np.ascontiguousarray(self.values.transpose(1, 2, 0))

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def hwc(self) -> np.ndarray:
        return self._hwc


def generate_scene(cfg: SceneGenConfig, rng: Rng, scene_id: int = 0) -> Scene:
    """
    Draw a scene with a uniform object count in [1, max_objects].

    Placements overlapping an accepted object by more than overlap_cap are
    rejected; after max_attempts draws the scene keeps what it has.
    """
    target_count = int(rng.integers(1, cfg.max_objects + 1))
    objects: List[GroundTruthObject] = []
    attempts = 0
    while len(objects) < target_count and attempts < cfg.max_attempts:
        attempts += 1
        w = float(rng.uniform(cfg.min_object_size, cfg.max_object_size))
        h = float(rng.uniform(cfg.min_object_size, cfg.max_object_size))
        x1 = float(rng.uniform(0.0, cfg.width - w))
        y1 = float(rng.uniform(0.0, cfg.height - h))
        category = int(rng.integers(0, cfg.num_classes))
        box = BBox(x1, y1, x1 + w, y1 + h)
        if all(iou(box, other.box) <= cfg.overlap_cap for other in objects):
            objects.append(GroundTruthObject(category, box))

    if len(objects) < target_count:
        logger.warning(
            f"Placed {len(objects)} of {target_count} objects after {attempts} attempts",
            extra={"scene_id": scene_id},
        )
    return Scene(scene_id=scene_id, width=cfg.width, height=cfg.height, objects=tuple(objects))


@lru_cache(maxsize=None)
def _signature(category: int, channels: int, signature_seed: int) -> Tuple[float, ...]:
    vec = Rng(signature_seed).child(category).normal(channels)
    return tuple(vec / np.linalg.norm(vec))


def category_signature(category: int, channels: int, signature_seed: int) -> np.ndarray:
    """Fixed unit vector identifying a category in feature space"""
    return np.array(_signature(category, channels, signature_seed))


def context_mask(box: BBox, height: int, width: int, sigma_ctx: float) -> np.ndarray:
    """1 inside the box, Gaussian falloff in box-diagonal units outside; shape H x W"""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx = np.maximum(np.maximum(box.x1 - xs, xs - box.x2), 0.0)
    dy = np.maximum(np.maximum(box.y1 - ys, ys - box.y2), 0.0)
    r = np.hypot(dx, dy) / box.diagonal
    return np.exp(-(r**2) / (2.0 * sigma_ctx**2))


def render_features(scene: Scene, cfg: FeatureConfig, rng: Rng) -> FeatureMap:
    """Sum of per-object signature x context mask, plus Gaussian background noise"""
    values = np.zeros((cfg.channels, scene.height, scene.width))
    for obj in scene.objects:
        mask = context_mask(obj.box, scene.height, scene.width, cfg.sigma_ctx)
        signature = category_signature(obj.category, cfg.channels, cfg.signature_seed)
        values += signature[:, None, None] * mask[None, :, :]
    if cfg.feat_noise > 0.0:
        values += cfg.feat_noise * rng.normal(values.shape)
    return FeatureMap(values)


def _gather(hwc: np.ndarray, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    """hwc[yy, xx] with zeros outside the map"""
    height, width = hwc.shape[:2]
    inside = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
    values = hwc[np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1)]
    return values * inside[..., None]


def roi_align_many(fmap: FeatureMap, boxes: np.ndarray, resolution: int) -> np.ndarray:
    """
    Bilinear ROI features for an (n, 4) box array -> (n, P, P, C).

    Each box is split into P x P equal bins sampled once at the bin center.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.size and not np.all((boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])):
        raise InvalidBoxError("roi_align requires boxes with positive extent")
    offsets = (np.arange(resolution) + 0.5) / resolution
    xs = boxes[:, 0:1] + offsets[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])  # (n, P)
    ys = boxes[:, 1:2] + offsets[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])

    x = np.broadcast_to(xs[:, None, :], (len(boxes), resolution, resolution))
    y = np.broadcast_to(ys[:, :, None], (len(boxes), resolution, resolution))
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    hwc = fmap.hwc
    return (
        (1.0 - fx) * (1.0 - fy) * _gather(hwc, y0, x0)
        + fx * (1.0 - fy) * _gather(hwc, y0, x0 + 1)
        + (1.0 - fx) * fy * _gather(hwc, y0 + 1, x0)
        + fx * fy * _gather(hwc, y0 + 1, x0 + 1)
    )


def roi_align(fmap: FeatureMap, box: BBox, resolution: int) -> np.ndarray:
    """P x P x C ROI feature block for one box"""
    box.validate()
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    return roi_align_many(fmap, box.to_array()[None, :], resolution)[0]


@lru_cache(maxsize=32)
def _anchor_grid(width: int, height: int, levels: Tuple[Tuple[float, Tuple[float, ...]], ...], ratios: Tuple[float, ...]) -> np.ndarray:
    rows = []
    for stride, sizes in levels:
        cx = (np.arange(int(width // stride)) + 0.5) * stride
        cy = (np.arange(int(height // stride)) + 0.5) * stride
        gx, gy = np.meshgrid(cx, cy)
        centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
        for size in sizes:
            for ratio in ratios:
                half_w = size / math.sqrt(ratio) / 2.0
                half_h = size * math.sqrt(ratio) / 2.0
                rows.append(np.concatenate([centers - [half_w, half_h], centers + [half_w, half_h]], axis=1))
    if not rows:
        return np.zeros((0, 4))
    grid = np.concatenate(rows, axis=0)
    grid.flags.writeable = False
    return grid


def anchor_grid(width: int, height: int, cfg: ProposalConfig) -> np.ndarray:
    levels = tuple((float(level.stride), tuple(float(s) for s in level.sizes)) for level in cfg.levels)
    return _anchor_grid(width, height, levels, tuple(float(r) for r in cfg.ratios))


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clamp an (n, 4) array to the image and drop rows that collapse below EPS_BOX"""
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, height)
    keep = (out[:, 2] - out[:, 0] >= EPS_BOX) & (out[:, 3] - out[:, 1] >= EPS_BOX)
    return out[keep]


def generate_proposal_array(scene: Scene, cfg: ProposalConfig, rng: Rng) -> np.ndarray:
    """Anchor grid followed by n_jitter perturbed boxes per object, clipped, as an (n, 4) array"""
    parts = [anchor_grid(scene.width, scene.height, cfg)]
    if cfg.n_jitter > 0:
        for obj in scene.objects:
            parts.append(perturb_boxes(obj.box, cfg.theta_prop, cfg.n_jitter, rng))
    return clip_boxes(np.concatenate(parts, axis=0), scene.width, scene.height)


def generate_proposals(scene: Scene, cfg: ProposalConfig, rng: Rng) -> List[BBox]:
    return [BBox.from_array(row) for row in generate_proposal_array(scene, cfg, rng)]


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


def oracle_teacher_labels(scene: Scene, cfg: TeacherOracleConfig, rng: Rng, num_classes: int) -> List[PseudoDetection]:
    """
    Simulated teacher output for a scene.

    Every object consumes the same random draws whether or not it is missed
    or flipped, so one object's fate never shifts another's.
    """
    detections: List[PseudoDetection] = []
    for obj in scene.objects:
        missed = rng.random() < cfg.miss_rate
        box = clip(perturb_box(obj.box, cfg.theta_noise, rng), scene.width, scene.height)
        flipped = rng.random() < cfg.flip_rate
        other = int(rng.integers(0, num_classes - 1))
        noise = float(rng.normal()) * cfg.conf_noise_std
        if missed:
            continue

        category = obj.category
        if flipped:
            category = other if other < obj.category else other + 1

        confidence = _sigmoid(cfg.conf_slope * (iou(box, obj.box) - cfg.conf_offset)) + noise
        if flipped:
            # scales the noisy value, before clamping
            confidence *= 1.0 - FLIP_CONFIDENCE_PENALTY
        confidence = min(max(confidence, 0.01), 0.99)
        detections.append(PseudoDetection(box=box, category=category, confidence=confidence, scene_id=scene.scene_id))
    return detections


@dataclass
class DatasetSplit:
    """
    Annotated scenes plus unannotated scenes whose ground truth is sealed.

    Training code reaches unannotated scenes only through `unlabeled_views`,
    `features`, `proposals` and `oracle_labels`, which derive image-level
    data without exposing objects. `sealed_ground_truth` is the evaluation hook.
    """

    gen_config: SceneGenConfig
    oracle_config: TeacherOracleConfig
    seed: int
    annotated: List[Scene]
    _sealed: List[Scene] = field(repr=False)

    @property
    def num_classes(self) -> int:
        return self.gen_config.num_classes

    @property
    def n_unannotated(self) -> int:
        return len(self._sealed)

    def unlabeled_views(self) -> List[UnlabeledScene]:
        return [UnlabeledScene(s.scene_id, s.width, s.height) for s in self._sealed]

    def sealed_ground_truth(self) -> List[Scene]:
        """Evaluation only: ground truth of the unannotated scenes"""
        return list(self._sealed)

    def _scene(self, scene_id: int) -> Scene:
        n_ann = len(self.annotated)
        if 0 <= scene_id < n_ann:
            return self.annotated[scene_id]
        if n_ann <= scene_id < n_ann + len(self._sealed):
            return self._sealed[scene_id - n_ann]
        raise KeyError(f"unknown scene id {scene_id}")

    def scene_rng(self, stream: int, scene_id: int) -> Rng:
        return Rng(self.seed).child(stream).child(scene_id)

    def features(self, scene_id: int, cfg: FeatureConfig) -> FeatureMap:
        return render_features(self._scene(scene_id), cfg, self.scene_rng(STREAM_RENDER, scene_id))

    def proposals(self, scene_id: int, cfg: ProposalConfig) -> np.ndarray:
        return generate_proposal_array(self._scene(scene_id), cfg, self.scene_rng(STREAM_PROPOSALS, scene_id))

    def oracle_labels(self, scene_id: int) -> List[PseudoDetection]:
        return oracle_teacher_labels(
            self._scene(scene_id), self.oracle_config, self.scene_rng(STREAM_ORACLE, scene_id), self.num_classes
        )

    def to_document(self) -> Dict[str, object]:
        def scene_doc(scene: Scene) -> Dict[str, object]:
            return {
                "scene_id": scene.scene_id,
                "width": scene.width,
                "height": scene.height,
                "objects": [[o.category, *o.box.as_tuple()] for o in scene.objects],
            }

        return {
            "format": SPLIT_FORMAT,
            "version": SPLIT_VERSION,
            "gen_config": self.gen_config.model_dump(),
            "oracle_cfg": self.oracle_config.model_dump(),
            "seeds": {"split": self.seed},
            "annotated": [scene_doc(s) for s in self.annotated],
            "unannotated": [scene_doc(s) for s in self._sealed],
        }

    @classmethod
    def from_document(cls, doc: Dict[str, object]) -> "DatasetSplit":
        if doc.get("format") != SPLIT_FORMAT or doc.get("version") != SPLIT_VERSION:
            raise ValueError(f"unsupported split header {doc.get('format')!r} v{doc.get('version')!r}")

        def parse_scene(raw: Dict[str, object]) -> Scene:
            objects = tuple(
                GroundTruthObject(int(row[0]), BBox(float(row[1]), float(row[2]), float(row[3]), float(row[4])))
                for row in raw["objects"]
            )
            return Scene(int(raw["scene_id"]), int(raw["width"]), int(raw["height"]), objects)

        return cls(
            gen_config=SceneGenConfig.model_validate(doc["gen_config"]),
            oracle_config=TeacherOracleConfig.model_validate(doc["oracle_cfg"]),
            seed=int(doc["seeds"]["split"]),
            annotated=[parse_scene(s) for s in doc["annotated"]],
            _sealed=[parse_scene(s) for s in doc["unannotated"]],
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DatasetSplit):
            return NotImplemented
        return self.to_document() == other.to_document()


def make_split(
    n_annotated: int,
    n_unannotated: int,
    gen_config: SceneGenConfig,
    oracle_cfg: TeacherOracleConfig,
    seed: int,
) -> DatasetSplit:
    """Annotated scenes take ids [0, n_annotated), unannotated the following range"""
    if n_annotated < 0 or n_unannotated < 0:
        raise ValueError("scene counts must be non-negative")
    root = Rng(seed).child(STREAM_SCENE)
    scenes = [generate_scene(gen_config, root.child(i), scene_id=i) for i in range(n_annotated + n_unannotated)]
    logger.info(f"Generated {n_annotated} annotated and {n_unannotated} unannotated scenes", extra={"seed": seed})
    return DatasetSplit(
        gen_config=gen_config,
        oracle_config=oracle_cfg,
        seed=seed,
        annotated=scenes[:n_annotated],
        _sealed=scenes[n_annotated:],
    )


def match_to_objects(boxes: np.ndarray, objects: Sequence[GroundTruthObject]) -> Tuple[np.ndarray, np.ndarray]:
    """Max IoU and index of the best object for each box (index -1 when there are no objects)"""
    if not objects or len(boxes) == 0:
        return np.zeros(len(boxes)), np.full(len(boxes), -1, dtype=np.int64)
    gt = np.array([o.box.as_tuple() for o in objects])
    overlaps = iou_matrix(boxes, gt)
    return overlaps.max(axis=1), overlaps.argmax(axis=1)
