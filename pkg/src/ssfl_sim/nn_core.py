"""Small numpy MLP classifier with hand-written backprop, SGD and a cosine schedule.

Weights are stored ``(out, in)`` so a forward layer is ``h @ W.T + b``. Hidden
layers may carry a static normalization: frozen ``mean``/``var`` statistics
(refreshed from a data pass, never from the current batch) followed by a
learnable affine ``scale``/``shift``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

LOG_EPS = 1e-12
NORM_EPS = 1e-5
MIN_LR_RATIO = 1e-4
_TINY = np.finfo(np.float64).tiny


@dataclass
class Norm:
    mean: np.ndarray
    var: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    def copy(self) -> "Norm":
        return Norm(self.mean.copy(), self.var.copy(), self.scale.copy(), self.shift.copy())


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norms: list[Norm | None] = field(default_factory=list)

    def __post_init__(self):
        if not self.norms:
            self.norms = [None] * len(self.weights)
        if not (len(self.weights) == len(self.biases) == len(self.norms)):
            raise ShapeError("weights, biases and norms must have one entry per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous layer emits {self.weights[i - 1].shape[0]}")
        if self.norms[-1] is not None:
            raise ShapeError("the output layer cannot be normalized")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[0]

    def trainable(self) -> list[np.ndarray]:
        """Flat list of learnable arrays in a fixed order (stats excluded)."""
        out = []
        for w, b, n in zip(self.weights, self.biases, self.norms):
            out.append(w)
            out.append(b)
            if n is not None:
                out.append(n.scale)
                out.append(n.shift)
        return out

    def with_trainable(self, arrays: Sequence[np.ndarray]) -> "ModelParams":
        """New params with the learnable arrays replaced; norm stats are copied."""
        it = iter(arrays)
        weights, biases, norms = [], [], []
        for n in self.norms:
            weights.append(next(it))
            biases.append(next(it))
            if n is None:
                norms.append(None)
            else:
                norms.append(Norm(n.mean.copy(), n.var.copy(), next(it), next(it)))
        return ModelParams(weights, biases, norms)

    def copy(self) -> "ModelParams":
        return self.with_trainable([a.copy() for a in self.trainable()])

    def is_finite(self) -> bool:
        arrays = self.trainable() + [a for n in self.norms if n is not None for a in (n.mean, n.var)]
        return all(np.isfinite(a).all() for a in arrays)


def tree_map(fn: Callable[..., np.ndarray], first: ModelParams, *rest: ModelParams) -> ModelParams:
    """Apply ``fn`` across the learnable arrays of one or more params.

    Normalization statistics are taken from ``first``.
    """
    groups = zip(first.trainable(), *(p.trainable() for p in rest))
    return first.with_trainable([fn(*g) for g in groups])


def zeros_like(params: ModelParams) -> ModelParams:
    return tree_map(np.zeros_like, params)


def init_mlp(layer_sizes: Sequence[int], rng: np.random.Generator, normalize: bool = False) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    ``layer_sizes`` is ``[in, hidden..., K]``; with ``normalize`` every hidden
    layer gets identity stats (mean 0, var 1) and unit scale.
    """
    if len(layer_sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    weights, biases, norms = [], [], []
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
        if normalize and i < n_layers - 1:
            norms.append(Norm(np.zeros(fan_out), np.ones(fan_out), np.ones(fan_out), np.zeros(fan_out)))
        else:
            norms.append(None)
    return ModelParams(weights, biases, norms)


def _as_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match model input dim {params.in_dim}")
    return x


def _forward(params: ModelParams, x: np.ndarray):
    # cache per layer: (layer input, zhat, inv_std, post-norm pre-activation)
    caches = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b, n) in enumerate(zip(params.weights, params.biases, params.norms)):
        z = h @ w.T + b
        if i == last:
            caches.append((h, None, None, None))
            return z, caches
        if n is not None:
            inv_std = 1.0 / np.sqrt(n.var + NORM_EPS)
            zhat = (z - n.mean) * inv_std
            u = zhat * n.scale + n.shift
        else:
            inv_std = zhat = None
            u = z
        caches.append((h, zhat, inv_std, u))
        h = np.maximum(u, 0.0)
    raise AssertionError("unreachable")


def forward_logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Raw class scores for a single vector ``(d,)`` or a batch ``(n, d)``."""
    single = np.ndim(x) == 1
    z, _ = _forward(params, _as_batch(params, x))
    return z[0] if single else z


def hidden_preactivations(params: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Pre-normalization outputs of each hidden linear layer, computed sequentially."""
    h = _as_batch(params, x)
    out = []
    for w, b, n in zip(params.weights[:-1], params.biases[:-1], params.norms[:-1]):
        z = h @ w.T + b
        out.append(z)
        if n is not None:
            z = (z - n.mean) / np.sqrt(n.var + NORM_EPS) * n.scale + n.shift
        h = np.maximum(z, 0.0)
    return out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise NumericError("non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    # keep every entry strictly positive when logit gaps exceed the exp range
    return np.maximum(e / e.sum(axis=-1, keepdims=True), _TINY)


def cross_entropy(probs: np.ndarray, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise ShapeError(f"label {label} out of range for {probs.shape[-1]} classes")
    return float(-np.log(max(probs[label], LOG_EPS)))


def kl_divergence(target: np.ndarray, predicted: np.ndarray) -> float:
    """KL(target || predicted) with ``0 log 0 = 0`` and a floored log on ``predicted``."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.shape != p.shape:
        raise ShapeError(f"target {t.shape} vs predicted {p.shape}")
    mask = t > 0
    return float(np.sum(t[mask] * (np.log(t[mask]) - np.log(np.maximum(p[mask], LOG_EPS)))))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


@dataclass
class LossTerm:
    """One summand of a training objective: ``weight * mean_i loss(target_i, softmax(f(x_i)))``.

    ``kind="ce"`` is soft-target cross entropy ``-sum t log p`` (hard labels are
    one-hot targets, the mixup two-label loss is the target ``lam*e_a + (1-lam)*e_b``);
    ``kind="kl"`` is ``KL(t || p)``. Both share the logit gradient ``p - t``.
    """

    x: np.ndarray
    target: np.ndarray
    kind: str = "ce"
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ce", "kl"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        self.x = np.asarray(self.x, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.x.ndim != 2 or self.target.ndim != 2 or self.x.shape[0] != self.target.shape[0]:
            raise ShapeError(f"term inputs {self.x.shape} and targets {self.target.shape} disagree")


def _term_value(term: LossTerm, logp: np.ndarray) -> float:
    t = term.target
    per_sample = -(t * logp).sum(axis=1)
    if term.kind == "kl":
        t_log_t = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
        per_sample = per_sample + t_log_t.sum(axis=1)
    return float(per_sample.mean())


def loss_value(params: ModelParams, terms: Sequence[LossTerm]) -> float:
    total = 0.0
    for term in terms:
        if term.x.shape[0] == 0 or term.weight == 0.0:
            continue
        logp = log_softmax(forward_logits(params, term.x))
        total += term.weight * _term_value(term, logp)
    return total


def value_and_grad(params: ModelParams, terms: Sequence[LossTerm]) -> tuple[float, ModelParams, list[float]]:
    """Scalar objective, its analytic gradient and the unweighted value of each term."""
    grads = [np.zeros_like(a) for a in params.trainable()]
    values: list[float] = []
    total = 0.0
    for term in terms:
        n = term.x.shape[0]
        if n == 0:
            values.append(0.0)
            continue
        z, caches = _forward(params, _as_batch(params, term.x))
        if term.target.shape[1] != z.shape[1]:
            raise ShapeError(f"target has {term.target.shape[1]} classes, model emits {z.shape[1]}")
        logp = log_softmax(z)
        v = _term_value(term, logp)
        values.append(v)
        if term.weight == 0.0:
            continue
        total += term.weight * v
        delta = (np.exp(logp) - term.target) * (term.weight / n)
        _backprop(params, caches, delta, grads)
    return total, params.with_trainable(grads), values


def _backprop(params: ModelParams, caches, delta: np.ndarray, out: list[np.ndarray]) -> None:
    slots = []
    pos = 0
    for n in params.norms:
        slots.append(pos)
        pos += 2 if n is None else 4
    for i in range(len(params.weights) - 1, -1, -1):
        s = slots[i]
        out[s] += delta.T @ caches[i][0]
        out[s + 1] += delta.sum(axis=0)
        if i == 0:
            return
        dh = delta @ params.weights[i]
        _, zhat, inv_std, u = caches[i - 1]
        du = dh * (u > 0)
        n = params.norms[i - 1]
        if n is not None:
            ps = slots[i - 1]
            out[ps + 2] += (du * zhat).sum(axis=0)
            out[ps + 3] += du.sum(axis=0)
            delta = du * n.scale * inv_std
        else:
            delta = du


@dataclass
class SgdState:
    velocity: ModelParams
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError(f"learning rate must be finite and positive, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")


def sgd_init(params: ModelParams, learning_rate: float, momentum: float = 0.9, weight_decay: float = 5e-4) -> SgdState:
    return SgdState(zeros_like(params), learning_rate, momentum, weight_decay)


def sgd_step(params: ModelParams, state: SgdState, grads: ModelParams) -> tuple[ModelParams, SgdState]:
    """PyTorch-style momentum SGD with coupled L2 decay on every learnable array."""
    mu, wd, lr = state.momentum, state.weight_decay, state.learning_rate
    velocity = tree_map(lambda v, g, p: mu * v + g + wd * p, state.velocity, grads, params)
    new_params = tree_map(lambda p, v: p - lr * v, params, velocity)
    return new_params, replace(state, velocity=velocity)


@dataclass
class LrSchedule:
    base_lr: float
    total_rounds: int
    current_round: int = 0
    min_ratio: float = MIN_LR_RATIO

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ValueError("total_rounds must be positive")
        if not 0 <= self.current_round <= self.total_rounds:
            raise ValueError(f"current_round {self.current_round} outside [0, {self.total_rounds}]")


def cosine_lr(schedule: LrSchedule) -> float:
    frac = schedule.current_round / schedule.total_rounds
    lr = schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
    return max(lr, schedule.min_ratio * schedule.base_lr)
