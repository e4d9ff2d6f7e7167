"""Diagnostics: accuracy, pseudo-label quality, utilization, confusion, calibration."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn_core as nn

ECE_BINS = 15


def pseudo_label_accuracy(pseudo_labels: np.ndarray, truth: np.ndarray) -> tuple[float, bool]:
    """Fraction of pseudo-labels equal to the hidden truth, and whether the selection was empty."""
    pseudo_labels = np.asarray(pseudo_labels)
    if pseudo_labels.size == 0:
        return 0.0, True
    return float(np.mean(pseudo_labels == np.asarray(truth))), False


def utilization_ratio(n_selected: int, client_sizes) -> float:
    total = int(np.sum(client_sizes))
    if total <= 0:
        raise ValueError("client sizes must be positive")
    return n_selected / total


def confusion_matrix(truth: np.ndarray, pseudo_labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts indexed ``[true class, pseudo-label]``."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pseudo_labels, dtype=np.int64)), 1)
    return cm


def top_confusions(cm: np.ndarray, n: int = 5) -> list[tuple[int, int, int]]:
    """Most frequent off-diagonal ``(true, pseudo, count)`` pairs, ties broken by index."""
    pairs = [(int(cm[i, j]), i, j) for i in range(cm.shape[0]) for j in range(cm.shape[1]) if i != j and cm[i, j] > 0]
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(i, j, c) for c, i, j in pairs[:n]]


@dataclass
class BinStat:
    lower: float
    upper: float
    mean_confidence: float | None
    accuracy: float | None
    count: int


def bin_edges(n_bins: int = ECE_BINS) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_bins + 1)


def ece(confidences: np.ndarray, correct: np.ndarray, n_bins: int = ECE_BINS) -> tuple[float, list[BinStat]]:
    """Expected calibration error over equal-width bins ``[lo, hi)``, last bin closed.

    Also returns per-bin stats (reliability diagram and confidence histogram data);
    empty bins report ``None`` for their mean confidence and accuracy.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("ece needs at least one prediction")
    if conf.min() < 0 or conf.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    edges = bin_edges(n_bins)
    which = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    conf_sum = np.bincount(which, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(which, weights=corr, minlength=n_bins)
    total = 0.0
    stats = []
    for b in range(n_bins):
        if counts[b] == 0:
            stats.append(BinStat(float(edges[b]), float(edges[b + 1]), None, None, 0))
            continue
        mc, ma = conf_sum[b] / counts[b], acc_sum[b] / counts[b]
        total += counts[b] / conf.size * abs(ma - mc)
        stats.append(BinStat(float(edges[b]), float(edges[b + 1]), float(mc), float(ma), int(counts[b])))
    return float(total), stats


def classwise_accuracy(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class recall; NaN marks a class absent from ``truth``."""
    out = np.full(num_classes, np.nan)
    for k in range(num_classes):
        mask = truth == k
        if mask.any():
            out[k] = float(np.mean(pred[mask] == k))
    return out


def evaluate_model(params: nn.ModelParams, x: np.ndarray, y: np.ndarray, n_bins: int = ECE_BINS):
    """Test accuracy, class-wise recall, ECE and bin stats of a model on clean inputs."""
    probs = nn.softmax(nn.forward_logits(params, x))
    pred = probs.argmax(axis=1)
    correct = pred == y
    e, bins = ece(probs.max(axis=1), correct, n_bins)
    return float(correct.mean()), classwise_accuracy(pred, y, params.num_classes), e, bins


@dataclass
class RoundReport:
    round: int
    lr: float
    test_accuracy: float
    classwise_accuracy: list[float | None]
    pl_accuracy: float
    pl_empty: bool
    utilization_ratio: float
    wrong_label_ratio: float
    n_pseudo: int
    n_unpseudo: int
    n_unlabeled: int
    warmup_clients: int
    sampled_clients: list[int]
    confusion: list[list[int]]
    ece: float
    bin_stats: list[dict]
    losses: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _json_safe(asdict(self))


def _json_safe(obj):
    if isinstance(obj, float):
        return None if not math.isfinite(obj) else obj
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj
