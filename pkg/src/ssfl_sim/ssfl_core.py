"""Client-side pseudo-labeling machinery.

Energy scores, per-class difficulty counts, adaptive warm-up thresholds, the
hybrid (confidence and energy) selection rule, and the three unlabeled loss
terms. Everything here works on feature arrays and the global model snapshot;
nothing in this module ever touches ground-truth labels of unlabeled data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn_core as nn


def energy_score(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray | float:
    """``-T * log sum_i exp(z_i / T)`` via a max-shifted log-sum-exp.

    Works on a single logit vector or on the last axis of a batch.
    """
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64) / temperature
    m = z.max(axis=-1)
    lse = m + np.log(np.exp(z - m[..., None]).sum(axis=-1))
    out = -temperature * lse
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class EnergyConfig:
    energy_threshold: float = -5.0
    temperature: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")


@dataclass(frozen=True)
class LabelingPass:
    """Global-model outputs on one weak view of a client's samples.

    Confidence, argmax, energy, difficulty counts and soft targets for a round
    all come from this single pass, so they are mutually consistent.
    """

    probs: np.ndarray
    energy: np.ndarray

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def pred(self) -> np.ndarray:
        # np.argmax returns the lowest index among ties
        return self.probs.argmax(axis=1)

    def __len__(self) -> int:
        return self.probs.shape[0]


def labeling_pass(global_params: nn.ModelParams, x_view: np.ndarray, temperature: float = 1.0) -> LabelingPass:
    if x_view.shape[0] == 0:
        k = global_params.num_classes
        return LabelingPass(np.zeros((0, k)), np.zeros(0))
    z = nn.forward_logits(global_params, x_view)
    return LabelingPass(nn.softmax(z), energy_score(z, temperature))


@dataclass(frozen=True)
class ClassDifficulty:
    sigma: np.ndarray  # confident-prediction counts per class
    sigma_rest: int
    total: int

    def __post_init__(self):
        if int(self.sigma.sum()) + self.sigma_rest != self.total or (self.sigma < 0).any() or self.sigma_rest < 0:
            raise ValueError("difficulty counts are inconsistent")


def class_difficulty(lp: LabelingPass, tau: float, num_classes: int | None = None) -> ClassDifficulty:
    """Per class, how many samples the global model predicts with confidence above ``tau``."""
    k = lp.probs.shape[1] if num_classes is None else num_classes
    confident = lp.confidence > tau
    sigma = np.bincount(lp.pred[confident], minlength=k).astype(np.int64)
    total = len(lp)
    return ClassDifficulty(sigma, total - int(sigma.sum()), total)


def convex_map(x):
    """The threshold warping ``x / (2 - x)``; fixes 0 and 1, below identity in between."""
    return x / (2.0 - x)


@dataclass(frozen=True)
class AdaptiveThresholds:
    beta: np.ndarray
    tau_c: np.ndarray
    global_tau: float
    warmup_active: bool


def adaptive_thresholds(difficulty: ClassDifficulty, tau: float) -> AdaptiveThresholds:
    """Normalize difficulty counts and warp them into per-class thresholds.

    While fewer samples clear ``tau`` than fail it the counts are divided by the
    failing count (warm-up: thresholds drop towards zero); afterwards they are
    divided by the largest class count.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    if difficulty.total == 0:
        raise ValueError("adaptive thresholds are undefined for an empty client dataset")
    sigma = difficulty.sigma.astype(np.float64)
    warmup = int(difficulty.sigma.sum()) < difficulty.sigma_rest
    if warmup:
        beta = sigma / difficulty.sigma_rest
    else:
        beta = sigma / sigma.max()
    return AdaptiveThresholds(beta, convex_map(beta) * tau, tau, warmup)


def fixed_thresholds(num_classes: int, tau: float) -> AdaptiveThresholds:
    """Constant ``tau`` for every class, never in warm-up (the fixed-threshold baseline)."""
    return AdaptiveThresholds(np.ones(num_classes), np.full(num_classes, float(tau)), tau, False)


@dataclass(frozen=True)
class PseudoSet:
    idx: np.ndarray  # positions within the client's samples
    labels: np.ndarray

    def __len__(self) -> int:
        return self.idx.shape[0]


@dataclass(frozen=True)
class UnpseudoSet:
    idx: np.ndarray
    targets: np.ndarray  # soft global-model distributions

    def __len__(self) -> int:
        return self.idx.shape[0]


def _confident(lp: LabelingPass, thresholds: AdaptiveThresholds) -> np.ndarray:
    pred = lp.pred
    return lp.confidence > thresholds.tau_c[pred]


def select_pseudo_hybrid(lp: LabelingPass, thresholds: AdaptiveThresholds,
                         energy_threshold: float) -> tuple[PseudoSet, UnpseudoSet]:
    """Pseudo-label samples that pass both the class threshold and the energy bound.

    Every other sample goes to the unpseudo set with its soft prediction.
    """
    accept = _confident(lp, thresholds) & (lp.energy < energy_threshold)
    p_idx = np.flatnonzero(accept)
    up_idx = np.flatnonzero(~accept)
    return PseudoSet(p_idx, lp.pred[p_idx]), UnpseudoSet(up_idx, lp.probs[up_idx])


def select_pseudo_warmup(lp: LabelingPass, thresholds: AdaptiveThresholds) -> PseudoSet:
    """Confidence-only rule used during warm-up; no energy test, no unpseudo set."""
    p_idx = np.flatnonzero(_confident(lp, thresholds))
    return PseudoSet(p_idx, lp.pred[p_idx])


def empty_unpseudo(num_classes: int) -> UnpseudoSet:
    return UnpseudoSet(np.zeros(0, dtype=np.int64), np.zeros((0, num_classes)))


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.75

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("mixup alpha must be > 0")


def sample_with_replacement(pseudo: PseudoSet, rng: np.random.Generator) -> PseudoSet:
    """The mixup partner set: ``|D_p|`` draws from ``D_p`` with replacement."""
    if len(pseudo) == 0:
        return pseudo
    pick = rng.integers(0, len(pseudo), size=len(pseudo))
    return PseudoSet(pseudo.idx[pick], pseudo.labels[pick])


def mixup_pair(x_p: np.ndarray, y_p, x_mix: np.ndarray, y_mix, config: MixupConfig,
               rng: np.random.Generator | None = None, lam: float | None = None):
    """Convex blend of a pseudo-labeled sample (or batch) with its mixup partner.

    ``lam`` is drawn raw from ``Beta(a, a)`` unless given. Returns
    ``(x_mixed, lam, y_p, y_mix)``.
    """
    if lam is None:
        lam = float(rng.beta(config.alpha, config.alpha))
    x_mixed = lam * np.asarray(x_p, dtype=np.float64) + (1.0 - lam) * np.asarray(x_mix, dtype=np.float64)
    return x_mixed, lam, y_p, y_mix


def pseudo_term(x_strong: np.ndarray, labels: np.ndarray, num_classes: int) -> nn.LossTerm:
    return nn.LossTerm(x_strong, nn.one_hot(labels, num_classes), "ce")


def unpseudo_term(x_strong: np.ndarray, soft_targets: np.ndarray) -> nn.LossTerm:
    return nn.LossTerm(x_strong, soft_targets, "kl")


def mixup_term(x_mixed_weak: np.ndarray, labels_a: np.ndarray, labels_b: np.ndarray, lam: float,
               num_classes: int) -> nn.LossTerm:
    # lam*H(a, p) + (1-lam)*H(b, p) == H(lam*e_a + (1-lam)*e_b, p)
    target = lam * nn.one_hot(labels_a, num_classes) + (1.0 - lam) * nn.one_hot(labels_b, num_classes)
    return nn.LossTerm(x_mixed_weak, target, "ce")


def _mean_or_zero(params: nn.ModelParams, term: nn.LossTerm) -> float:
    if term.x.shape[0] == 0:
        return 0.0
    return nn.loss_value(params, [term])


def pseudo_loss(params: nn.ModelParams, x_strong: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross entropy of strong-view predictions against hard pseudo-labels; 0 if empty."""
    return _mean_or_zero(params, pseudo_term(x_strong, labels, params.num_classes))


def unpseudo_loss(params: nn.ModelParams, x_strong: np.ndarray, soft_targets: np.ndarray) -> float:
    """Mean ``KL(soft target || strong-view prediction)``; 0 if empty."""
    return _mean_or_zero(params, unpseudo_term(x_strong, soft_targets))


def mixup_loss(params: nn.ModelParams, x_mixed_weak: np.ndarray, labels_a, labels_b, lam: float) -> float:
    return _mean_or_zero(params, mixup_term(x_mixed_weak, labels_a, labels_b, lam, params.num_classes))


def total_unlabeled_loss(l_p: float, l_up: float, l_mix: float) -> float:
    return l_p + l_up + l_mix


def unpseudo_batch_size(pseudo_batch: int, mu: float) -> int:
    return int(math.ceil(mu * pseudo_batch))
