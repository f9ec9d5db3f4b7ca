"""Axis-aligned box geometry: IoU, GIoU with analytic gradient, delta codec, clipping, NMS"""

import math
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from utils.errors import InvalidBoxError

# Minimum extent (pixels) a box is clamped to when decoding or clipping collapses it
EPS_BOX = 1e-3

# Largest log-scale a delta may apply; keeps exp() finite on extreme network outputs
DELTA_SCALE_CLAMP = math.log(1000.0 / 16.0)

COORDS = ("x1", "y1", "x2", "y2")


@dataclass(frozen=True)
class BBox:
    """
    Corner-parameterized box in continuous image coordinates (x right, y down).

    `degenerate` marks boxes that were clamped to the minimum extent by
    decode_delta or clip; it does not take part in equality.
    """

    x1: float
    y1: float
    x2: float
    y2: float
    degenerate: bool = field(default=False, compare=False)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def is_valid(self) -> bool:
        return (
            all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2))
            and self.x1 < self.x2
            and self.y1 < self.y2
        )

    def validate(self) -> "BBox":
        if not self.is_valid():
            raise InvalidBoxError(f"invalid box {self.as_tuple()}")
        return self

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float], degenerate: bool = False) -> "BBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2, degenerate=degenerate)

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)


@dataclass(frozen=True)
class Delta:
    """Box offsets relative to a reference box: center shift over size, log size ratio"""

    dx: float
    dy: float
    dw: float
    dh: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Delta":
        dx, dy, dw, dh = (float(v) for v in values)
        return cls(dx, dy, dw, dh)


@dataclass(frozen=True)
class ScoredBox:
    box: BBox
    score: float
    category: int


def boxes_to_array(boxes: Iterable[BBox]) -> np.ndarray:
    """Stack boxes into an (n, 4) array; an empty input gives shape (0, 4)"""
    rows = [b.as_tuple() for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes"""
    a.validate()
    b.validate()
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the share of the enclosing box outside the union"""
    a.validate()
    b.validate()
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    return inter / union - (enclose - union) / enclose


def giou_loss_grad(pred: BBox, target: BBox) -> Tuple[float, np.ndarray]:
    """
    GIoU loss 1 - giou(pred, target) and its gradient w.r.t. pred's (x1, y1, x2, y2).

    max/min branch selections are treated as locally constant. At a tie the
    target's coordinate is taken as the selected one, so a tied pred
    coordinate receives no gradient through that max/min.

    Returns:
        Tuple of (loss, gradient 4-vector)
    """
    if not pred.is_valid():
        raise InvalidBoxError(f"degenerate prediction {pred.as_tuple()}")
    target.validate()

    px1, py1, px2, py2 = pred.as_tuple()
    tx1, ty1, tx2, ty2 = target.as_tuple()
    pw, ph = px2 - px1, py2 - py1

    area_p = pw * ph
    area_t = (tx2 - tx1) * (ty2 - ty1)

    iw = min(px2, tx2) - max(px1, tx1)
    ih = min(py2, ty2) - max(py1, ty1)
    overlapping = iw > 0.0 and ih > 0.0
    inter = iw * ih if overlapping else 0.0
    union = area_p + area_t - inter

    cw = max(px2, tx2) - min(px1, tx1)
    ch = max(py2, ty2) - min(py1, ty1)
    enclose = cw * ch

    loss = 2.0 - inter / union - union / enclose

    d_area_p = np.array([-ph, -pw, ph, pw])
    d_inter = np.zeros(4)
    if overlapping:
        d_inter[0] = -ih if px1 > tx1 else 0.0
        d_inter[1] = -iw if py1 > ty1 else 0.0
        d_inter[2] = ih if px2 < tx2 else 0.0
        d_inter[3] = iw if py2 < ty2 else 0.0
    d_enclose = np.array([
        -ch if px1 < tx1 else 0.0,
        -cw if py1 < ty1 else 0.0,
        ch if px2 > tx2 else 0.0,
        cw if py2 > ty2 else 0.0,
    ])
    d_union = d_area_p - d_inter

    grad = -(d_inter * union - inter * d_union) / union**2 - (d_union * enclose - union * d_enclose) / enclose**2
    return float(loss), grad


def encode_delta(ref: BBox, target: BBox) -> Delta:
    """Offsets that move `ref` onto `target`"""
    ref.validate()
    target.validate()
    rcx, rcy = ref.center
    tcx, tcy = target.center
    return Delta(
        dx=(tcx - rcx) / ref.width,
        dy=(tcy - rcy) / ref.height,
        dw=math.log(target.width / ref.width),
        dh=math.log(target.height / ref.height),
    )


def encode_delta_array(ref: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Row-wise encode_delta for (n, 4) arrays -> (n, 4) deltas"""
    rw = ref[:, 2] - ref[:, 0]
    rh = ref[:, 3] - ref[:, 1]
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    if np.any(rw <= 0) or np.any(rh <= 0) or np.any(tw <= 0) or np.any(th <= 0):
        raise InvalidBoxError("encode_delta requires boxes with positive extent")
    return np.stack(
        [
            ((target[:, 0] + target[:, 2]) - (ref[:, 0] + ref[:, 2])) / 2.0 / rw,
            ((target[:, 1] + target[:, 3]) - (ref[:, 1] + ref[:, 3])) / 2.0 / rh,
            np.log(tw / rw),
            np.log(th / rh),
        ],
        axis=1,
    )


def decode_delta(ref: BBox, d: Delta) -> BBox:
    """
    Apply offsets to a reference box.

    Extents that collapse below EPS_BOX are clamped to EPS_BOX around the
    decoded center and the result is flagged degenerate.
    """
    ref.validate()
    rcx, rcy = ref.center
    cx = rcx + d.dx * ref.width
    cy = rcy + d.dy * ref.height
    w = ref.width * math.exp(min(d.dw, DELTA_SCALE_CLAMP))
    h = ref.height * math.exp(min(d.dh, DELTA_SCALE_CLAMP))
    degenerate = False
    if not w >= EPS_BOX:
        w, degenerate = EPS_BOX, True
    if not h >= EPS_BOX:
        h, degenerate = EPS_BOX, True
    return BBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, degenerate=degenerate)


def decode_delta_jacobian(ref: BBox, d: Delta) -> np.ndarray:
    """
    Jacobian of decode_delta's (x1, y1, x2, y2) w.r.t. (dx, dy, dw, dh).

    Rows are box coordinates, columns are delta components. Clamped scale
    components contribute no gradient.
    """
    ref.validate()
    w = ref.width * math.exp(min(d.dw, DELTA_SCALE_CLAMP))
    h = ref.height * math.exp(min(d.dh, DELTA_SCALE_CLAMP))
    dw_live = d.dw < DELTA_SCALE_CLAMP and w >= EPS_BOX
    dh_live = d.dh < DELTA_SCALE_CLAMP and h >= EPS_BOX
    half_w = w / 2.0 if dw_live else 0.0
    half_h = h / 2.0 if dh_live else 0.0
    return np.array([
        [ref.width, 0.0, -half_w, 0.0],
        [0.0, ref.height, 0.0, -half_h],
        [ref.width, 0.0, half_w, 0.0],
        [0.0, ref.height, 0.0, half_h],
    ])


def clip(b: BBox, width: float, height: float) -> BBox:
    """
    Clamp a box to [0, width] x [0, height].

    If clamping collapses an extent, a minimum-extent box inside the image is
    returned, flagged degenerate.
    """
    x1 = min(max(b.x1, 0.0), width)
    y1 = min(max(b.y1, 0.0), height)
    x2 = min(max(b.x2, 0.0), width)
    y2 = min(max(b.y2, 0.0), height)
    if x2 - x1 < EPS_BOX or y2 - y1 < EPS_BOX:
        x1 = min(x1, width - EPS_BOX)
        y1 = min(y1, height - EPS_BOX)
        return BBox(x1, y1, x1 + EPS_BOX, y1 + EPS_BOX, degenerate=True)
    return BBox(x1, y1, x2, y2, degenerate=b.degenerate)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) box arrays -> (n, m)"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def paired_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise IoU between two (n, 4) box arrays -> (n,)"""
    lt = np.maximum(a[:, :2], b[:, :2])
    rb = np.minimum(a[:, 2:], b[:, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a + area_b - inter)


def nms_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Indices sorted by (score desc, x1 asc, y1 asc)"""
    # np.lexsort sorts by the last key first
    return np.lexsort((boxes[:, 1], boxes[:, 0], -scores))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> List[int]:
    """Greedy suppression on arrays of a single category; returns kept indices in keep order"""
    order = nms_order(boxes, scores)
    keep: List[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        if rest.size == 0:
            break
        overlaps = iou_matrix(boxes[i : i + 1], boxes[rest])[0]
        order = rest[overlaps <= iou_thresh]
    return keep


def nms(dets: Sequence[ScoredBox], iou_thresh: float) -> List[ScoredBox]:
    """
    Greedy non-maximum suppression per category.

    Kept detections are returned in (score desc, x1 asc, y1 asc) order.
    """
    if not dets:
        return []
    kept: List[ScoredBox] = []
    for category in sorted({d.category for d in dets}):
        group = [d for d in dets if d.category == category]
        boxes = boxes_to_array(d.box for d in group)
        scores = np.array([d.score for d in group], dtype=np.float64)
        kept.extend(group[i] for i in nms_indices(boxes, scores, iou_thresh))
    kept.sort(key=lambda d: (-d.score, d.box.x1, d.box.y1))
    return kept
