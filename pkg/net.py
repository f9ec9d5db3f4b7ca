"""Dense ReLU networks with explicit backward pass, losses, SGD/AdamW optimizers and EMA averaging"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from geom import Delta
from sample import Rng
from utils.errors import DivergenceError, ShapeMismatchError

CHECKPOINT_FORMAT = "dense-net"
CHECKPOINT_VERSION = 1


class OptimizerConfig(BaseModel):
    """
    sgd: momentum SGD with coupled L2 weight decay.
    adamw: Adam with decoupled weight decay; momentum is beta1.
    """

    model_config = ConfigDict(extra="forbid")

    kind: Literal["sgd", "adamw"] = "sgd"
    lr: float = Field(0.01, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, le=1.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)

    @model_validator(mode="after")
    def _check_beta1(self) -> "OptimizerConfig":
        if self.kind == "adamw" and self.momentum >= 1.0:
            raise ValueError("adamw needs momentum (beta1) below 1")
        return self


@dataclass
class ForwardCache:
    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    squeeze: bool


class DenseNet:
    """
    Fully connected stack: ReLU after every layer except the last, identity output.

    Inputs may be a single vector or a row-stacked batch; batch gradients are
    sums over rows.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ShapeMismatchError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatchError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i > 0 and w.shape[1] != weights[i - 1].shape[0]:
                raise ShapeMismatchError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {weights[i - 1].shape[0]}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @classmethod
    def init(cls, layer_sizes: Sequence[int], rng: Rng, output_std: Optional[float] = None) -> "DenseNet":
        """
        He-normal weights N(0, 2 / fan_in), zero biases.

        output_std replaces the He scale of the last layer, e.g. 0.001 for a
        regression output that should start near zero.
        """
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if output_std is not None and output_std < 0:
            raise ValueError("output_std must be non-negative")
        weights, biases = [], []
        last = len(layer_sizes) - 2
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            scale = output_std if (i == last and output_std is not None) else np.sqrt(2.0 / fan_in)
            weights.append(rng.normal((fan_out, fan_in)) * scale)
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> "DenseNet":
        return cls(
            [np.zeros((o, i)) for i, o in zip(layer_sizes[:-1], layer_sizes[1:])],
            [np.zeros(o) for o in layer_sizes[1:]],
        )

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def params(self) -> List[np.ndarray]:
        """Parameter arrays interleaved as [W0, b0, W1, b1, ...]; updated in place by optimizers"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        a = x[None, :] if squeeze else x
        if a.ndim != 2 or a.shape[1] != self.weights[0].shape[1]:
            raise ShapeMismatchError(f"input of shape {x.shape} does not match {self.weights[0].shape[1]} inputs")

        inputs, pre = [], []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = a @ w.T + b
            pre.append(z)
            a = z if i == last else np.maximum(z, 0.0)
        return (a[0] if squeeze else a), ForwardCache(inputs, pre, squeeze)

    def backward(self, cache: ForwardCache, dy: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Reverse-mode gradients for an upstream gradient dy.

        Returns:
            Tuple of (grads aligned with params(), gradient w.r.t. the input)
        """
        dy = np.asarray(dy, dtype=np.float64)
        d = dy[None, :] if cache.squeeze else dy
        if d.shape != cache.pre_activations[-1].shape:
            raise ShapeMismatchError(f"upstream gradient {dy.shape} does not match output {cache.pre_activations[-1].shape}")

        grads: List[np.ndarray] = [None] * (2 * len(self.weights))
        last = len(self.weights) - 1
        for i in range(last, -1, -1):
            dz = d if i == last else d * (cache.pre_activations[i] > 0.0)
            grads[2 * i] = dz.T @ cache.inputs[i]
            grads[2 * i + 1] = dz.sum(axis=0)
            d = dz @ self.weights[i]
        return grads, (d[0] if cache.squeeze else d)

    def to_document(self) -> Dict[str, object]:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "layers": [
                {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_document(cls, doc: Dict[str, object]) -> "DenseNet":
        if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint header {doc.get('format')!r} v{doc.get('version')!r}")
        weights, biases = [], []
        for layer in doc["layers"]:
            weights.append(np.array(layer["weights"], dtype=np.float64).reshape(layer["shape"]))
            biases.append(np.array(layer["bias"], dtype=np.float64))
        return cls(weights, biases)


def zero_grads(params: Sequence[np.ndarray]) -> List[np.ndarray]:
    return [np.zeros_like(p) for p in params]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, target: Union[int, np.ndarray]) -> Tuple[float, np.ndarray]:
    """
    -log softmax(logits)[target] and its gradient softmax - onehot.

    For a batch (n, K) with n targets the mean loss is returned and the
    gradient is divided by n accordingly.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        shifted = logits - logits.max()
        log_probs = shifted - np.log(np.exp(shifted).sum())
        grad = np.exp(log_probs)
        grad[int(target)] -= 1.0
        return float(-log_probs[int(target)]), grad

    target = np.asarray(target, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    grad = np.exp(log_probs)
    grad[rows, target] -= 1.0
    return float(-log_probs[rows, target].mean()), grad / n


def smooth_l1(pred: Union[Delta, np.ndarray], target: Union[Delta, np.ndarray], beta: float) -> Tuple[float, np.ndarray]:
    """
    Element-wise Huber loss, summed: 0.5 e^2 / beta for |e| < beta, |e| - beta / 2 otherwise.

    beta = 0 is the plain l1 loss.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    p = pred.to_array() if isinstance(pred, Delta) else np.asarray(pred, dtype=np.float64)
    t = target.to_array() if isinstance(target, Delta) else np.asarray(target, dtype=np.float64)
    err = p - t
    abs_err = np.abs(err)
    if beta == 0.0:
        return float(abs_err.sum()), np.sign(err)
    quadratic = abs_err < beta
    loss = np.where(quadratic, 0.5 * err**2 / beta, abs_err - 0.5 * beta)
    grad = np.where(quadratic, err / beta, np.sign(err))
    return float(loss.sum()), grad


@dataclass
class OptimState:
    lr: float
    momentum: float
    weight_decay: float
    buffers: List[np.ndarray] = field(default_factory=list)
    kind: str = "sgd"
    beta2: float = 0.999
    eps: float = 1e-8
    # adamw only
    second: List[np.ndarray] = field(default_factory=list)
    steps: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], cfg: OptimizerConfig) -> "OptimState":
        second = zero_grads(params) if cfg.kind == "adamw" else []
        return cls(cfg.lr, cfg.momentum, cfg.weight_decay, zero_grads(params), cfg.kind, cfg.beta2, cfg.eps, second)


def _check_step_inputs(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], buffers: Sequence[np.ndarray]):
    if len(params) != len(grads) or len(params) != len(buffers):
        raise ShapeMismatchError("params, grads and momentum buffers must align")
    for p, g, v in zip(params, grads, buffers):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeMismatchError(f"shape mismatch: param {p.shape}, grad {g.shape}, buffer {v.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState):
    """
    In-place momentum SGD: v <- mu v + g + wd p; p <- p - lr v.

    Returns:
        Tuple of (params, state)
    """
    _check_step_inputs(params, grads, state.buffers)
    for p, g, v in zip(params, grads, state.buffers):
        v *= state.momentum
        v += g + state.weight_decay * p
        p -= state.lr * v
    return params, state


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState):
    """
    In-place AdamW with bias correction:
    m <- b1 m + (1 - b1) g; s <- b2 s + (1 - b2) g^2;
    p <- p - lr (m_hat / (sqrt(s_hat) + eps) + wd p).

    Returns:
        Tuple of (params, state)
    """
    _check_step_inputs(params, grads, state.buffers)
    if len(state.second) != len(params):
        raise ShapeMismatchError("adamw state has no second-moment buffers for these params")
    state.steps += 1
    b1, b2 = state.momentum, state.beta2
    correction1 = 1.0 - b1**state.steps
    correction2 = 1.0 - b2**state.steps
    for p, g, m, s in zip(params, grads, state.buffers, state.second):
        m *= b1
        m += (1.0 - b1) * g
        s *= b2
        s += (1.0 - b2) * g * g
        update = (m / correction1) / (np.sqrt(s / correction2) + state.eps)
        p -= state.lr * (update + state.weight_decay * p)
    return params, state


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimState):
    """Dispatch on state.kind"""
    if state.kind == "adamw":
        return adamw_step(params, grads, state)
    if state.kind == "sgd":
        return sgd_step(params, grads, state)
    raise ValueError(f"unknown optimizer kind {state.kind!r}")


@dataclass
class EmaPair:
    student: List[np.ndarray]
    teacher: List[np.ndarray]
    momentum: float


def ema_update(pair: EmaPair) -> List[np.ndarray]:
    """In-place teacher <- m * teacher + (1 - m) * student"""
    if not 0.0 <= pair.momentum <= 1.0:
        raise ValueError("EMA momentum must be in [0, 1]")
    if len(pair.student) != len(pair.teacher):
        raise ShapeMismatchError("student and teacher have different parameter counts")
    for s, t in zip(pair.student, pair.teacher):
        if s.shape != t.shape:
            raise ShapeMismatchError(f"student {s.shape} vs teacher {t.shape}")
    m = pair.momentum
    for s, t in zip(pair.student, pair.teacher):
        t *= m
        t += (1.0 - m) * s
    return pair.teacher
