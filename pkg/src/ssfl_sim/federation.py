"""Round loop: server fine-tuning, sBN refresh, client sampling, local pseudo-label training,
weighted aggregation and server-side momentum.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import metrics
from . import nn_core as nn
from . import ssfl_core as core
from .data import AugmentConfig, FederatedData, LabeledDataset, SampleView, strong_augment, weak_augment
from .errors import ConfigError, TrainingError
from .seeding import derive_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MethodFlags:
    cawt: bool
    unpseudo: bool
    hybrid: bool


METHODS = {
    "fixed_baseline": MethodFlags(False, False, False),
    "cawt_only": MethodFlags(True, False, False),
    "unpseudo_only": MethodFlags(False, True, False),
    "hybrid_only": MethodFlags(False, False, True),
    "cawt_unpseudo": MethodFlags(True, True, False),
    "cawt_hybrid": MethodFlags(True, False, True),
    "unpseudo_hybrid": MethodFlags(False, True, True),
    "catchfed": MethodFlags(True, True, True),
}


@dataclass(frozen=True)
class RunConfig:
    rounds: int = 60
    clients: int = 20
    participation: float = 0.25
    hidden: tuple[int, ...] = (64, 64)
    normalize: bool = False
    server_mode: str = "iterations"  # "iterations" or "epochs"
    server_iters: int = 50
    server_epochs: int = 5
    server_batch: int = 10
    client_iters: int = 100
    warmup_iters: int = 100
    client_batch: int = 10
    mu: float = 1.0
    tau: float = 0.95
    energy_threshold: float = -5.0
    temperature: float = 1.0
    mixup_alpha: float = 0.75
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    global_momentum: float = 0.5
    aggregation: str = "size"  # "size" or "uniform"
    method: str = "catchfed"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.rounds < 0:
            problems.append("rounds must be >= 0")
        if self.clients < 1:
            problems.append("clients must be >= 1")
        if not 0 < self.participation <= 1:
            problems.append("participation must lie in (0, 1]")
        elif clients_per_round(self.clients, self.participation) < 1:
            problems.append("participation: floor(clients * participation) must be >= 1")
        if self.server_mode not in ("iterations", "epochs"):
            problems.append("server_mode must be 'iterations' or 'epochs'")
        for name in ("server_iters", "server_epochs", "client_iters", "warmup_iters"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("server_batch", "client_batch"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.mu < 0:
            problems.append("mu must be >= 0")
        if not 0 < self.tau < 1:
            problems.append("tau must lie in (0, 1)")
        if not self.temperature > 0:
            problems.append("temperature must be > 0")
        if not self.mixup_alpha > 0:
            problems.append("mixup_alpha must be > 0")
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if not 0 <= self.momentum < 1:
            problems.append("momentum must lie in [0, 1)")
        if not 0 <= self.global_momentum < 1:
            problems.append("global_momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.aggregation not in ("size", "uniform"):
            problems.append("aggregation must be 'size' or 'uniform'")
        if self.method not in METHODS:
            problems.append(f"method must be one of {sorted(METHODS)}")
        if problems:
            raise ConfigError(problems)

    @property
    def flags(self) -> MethodFlags:
        return METHODS[self.method]


@dataclass
class ServerState:
    global_params: nn.ModelParams
    velocity: nn.ModelParams
    round: int = 0
    server_loss: float = 0.0


@dataclass
class ClientResult:
    client_id: int
    params: nn.ModelParams
    weight: float
    n_unlabeled: int
    pseudo_idx: np.ndarray
    pseudo_labels: np.ndarray
    n_unpseudo: int
    warmup: bool
    iterations: int
    losses: dict = field(default_factory=dict)  # per-term sums over iterations


def clients_per_round(m: int, p: float) -> int:
    # tolerance absorbs products like 0.29 * 100 = 28.999999999999996
    return int(math.floor(m * p + 1e-9))


def round_lr(config: RunConfig, round_idx: int) -> float:
    """Learning rate shared by server and clients in 1-based round ``round_idx``."""
    return nn.cosine_lr(nn.LrSchedule(config.lr, max(config.rounds, 1), round_idx - 1))


def init_state(config: RunConfig, dim: int, num_classes: int) -> ServerState:
    params = nn.init_mlp([dim, *config.hidden, num_classes], derive_rng(config.seed, "init"), config.normalize)
    return ServerState(params, nn.zeros_like(params))


class CyclicSampler:
    """Mini-batches drawn without replacement from a stream of fresh permutations."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self._perm = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def next(self, size: int) -> np.ndarray:
        out = []
        need = size
        while need > 0:
            if self._pos >= self._perm.size:
                self._perm = self.rng.permutation(self.n)
                self._pos = 0
            take = self._perm[self._pos:self._pos + need]
            self._pos += take.size
            need -= take.size
            out.append(take)
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def server_update(state: ServerState, labeled: LabeledDataset, config: RunConfig, round_idx: int) -> ServerState:
    """Supervised fine-tuning of the global model on weak views of the server labels."""
    if len(labeled) == 0:
        raise ConfigError("server labeled set is empty")
    rng = derive_rng(config.seed, "server", round_idx)
    opt = nn.sgd_init(state.global_params, round_lr(config, round_idx), config.momentum, config.weight_decay)
    params = state.global_params
    k = params.num_classes
    n = len(labeled)
    if config.server_mode == "epochs":
        batches = []
        for _ in range(config.server_epochs):
            perm = rng.permutation(n)
            batches.extend(perm[i:i + config.server_batch] for i in range(0, n, config.server_batch))
    else:
        sampler = CyclicSampler(n, rng)
        batches = [sampler.next(min(config.server_batch, n)) for _ in range(config.server_iters)]
    losses = []
    for b in batches:
        xb = weak_augment(labeled.x[b], config.augment, rng)
        loss, grads, _ = nn.value_and_grad(params, [nn.LossTerm(xb, nn.one_hot(labeled.y[b], k), "ce")])
        params, opt = nn.sgd_step(params, opt, grads)
        losses.append(loss)
    return replace(state, global_params=params, server_loss=float(np.mean(losses)) if losses else 0.0)


def update_sbn_stats(state: ServerState, server_x: np.ndarray, config: RunConfig) -> ServerState:
    """Recompute static normalization statistics in one pass over the server inputs."""
    params = state.global_params
    if not config.normalize or all(n is None for n in params.norms):
        return state
    params = params.copy()
    # layer l's statistics depend on the refreshed statistics of layers < l
    for layer, n in enumerate(params.norms):
        if n is None:
            continue
        z = nn.hidden_preactivations(params, server_x)[layer]
        n.mean[:] = z.mean(axis=0)
        n.var[:] = z.var(axis=0)
    return replace(state, global_params=params)


def sample_clients(m: int, p: float, round_idx: int, seed: int) -> list[int]:
    n = clients_per_round(m, p)
    if n < 1:
        raise ConfigError("participation: floor(M * P) must be >= 1")
    rng = derive_rng(seed, "sample-clients", round_idx)
    return sorted(int(c) for c in rng.choice(m, size=n, replace=False))


def labeling_view(view: SampleView, augment: AugmentConfig, seed: int, round_idx: int) -> np.ndarray:
    """One weak view per sample per round, keyed by (seed, round, sample id).

    Row ``i`` of a single per-round normal stream belongs to sample id ``i``, so
    a sample's view does not depend on which client holds it.
    """
    if len(view) == 0 or augment.weak_noise_std == 0:
        return view.x.copy()
    rng = derive_rng(seed, "labeling-view", round_idx)
    noise = rng.standard_normal((int(view.ids.max()) + 1, view.x.shape[1]))[view.ids]
    return view.x + augment.weak_noise_std * noise


def select_for_client(global_params: nn.ModelParams, view: SampleView, config: RunConfig, round_idx: int):
    """Thresholds and the pseudo/unpseudo split for one client in one round."""
    flags = config.flags
    k = global_params.num_classes
    lp = core.labeling_pass(global_params, labeling_view(view, config.augment, config.seed, round_idx),
                            config.temperature)
    if flags.cawt:
        thresholds = core.adaptive_thresholds(core.class_difficulty(lp, config.tau, k), config.tau)
    else:
        thresholds = core.fixed_thresholds(k, config.tau)
    if thresholds.warmup_active:
        return lp, thresholds, core.select_pseudo_warmup(lp, thresholds), core.empty_unpseudo(k)
    energy_threshold = config.energy_threshold if flags.hybrid else math.inf
    pseudo, unpseudo = core.select_pseudo_hybrid(lp, thresholds, energy_threshold)
    if not flags.unpseudo:
        unpseudo = core.empty_unpseudo(k)
    return lp, thresholds, pseudo, unpseudo


def client_update(global_params: nn.ModelParams, view: SampleView, config: RunConfig, round_idx: int,
                  client_id: int) -> ClientResult:
    """Local training of one client starting from the broadcast snapshot."""
    if len(view) == 0:
        raise ConfigError(f"client {client_id} has no data")
    k = global_params.num_classes
    _, thresholds, pseudo, unpseudo = select_for_client(global_params, view, config, round_idx)
    iters = config.warmup_iters if thresholds.warmup_active else config.client_iters
    rng = derive_rng(config.seed, "client", round_idx, client_id)
    mix = core.sample_with_replacement(pseudo, rng)
    n_up = core.unpseudo_batch_size(config.client_batch, config.mu)
    result = ClientResult(client_id, global_params, float(len(view)), len(view), pseudo.idx, pseudo.labels,
                          len(unpseudo), thresholds.warmup_active, 0,
                          {"pseudo": 0.0, "unpseudo": 0.0, "mixup": 0.0})
    use_up = len(unpseudo) > 0 and n_up > 0
    if iters == 0 or (len(pseudo) == 0 and not use_up):
        return result

    x = view.x
    params = global_params
    opt = nn.sgd_init(params, round_lr(config, round_idx), config.momentum, config.weight_decay)
    samp_p = CyclicSampler(len(pseudo), rng) if len(pseudo) else None
    samp_m = CyclicSampler(len(mix), rng) if len(pseudo) else None
    samp_u = CyclicSampler(len(unpseudo), rng) if use_up else None
    mix_cfg = core.MixupConfig(config.mixup_alpha)
    totals = {"pseudo": 0.0, "unpseudo": 0.0, "mixup": 0.0}
    for _ in range(iters):
        terms, names = [], []
        if samp_p is not None:
            bp = samp_p.next(config.client_batch)
            bm = samp_m.next(config.client_batch)
            xp = x[pseudo.idx[bp]]
            terms.append(core.pseudo_term(strong_augment(xp, config.augment, rng), pseudo.labels[bp], k))
            names.append("pseudo")
            xm, lam, ya, yb = core.mixup_pair(xp, pseudo.labels[bp], x[mix.idx[bm]], mix.labels[bm], mix_cfg, rng)
            terms.append(core.mixup_term(weak_augment(xm, config.augment, rng), ya, yb, lam, k))
            names.append("mixup")
        if samp_u is not None:
            bu = samp_u.next(n_up)
            xu = strong_augment(x[unpseudo.idx[bu]], config.augment, rng)
            terms.append(core.unpseudo_term(xu, unpseudo.targets[bu]))
            names.append("unpseudo")
        _, grads, values = nn.value_and_grad(params, terms)
        params, opt = nn.sgd_step(params, opt, grads)
        for name, v in zip(names, values):
            totals[name] += v
    result.params = params
    result.iterations = iters
    result.losses = totals
    return result


def aggregate(results: list[ClientResult], uniform: bool = False) -> nn.ModelParams:
    """Weighted average of client params, summed in ascending client-id order."""
    if not results:
        raise ValueError("nothing to aggregate")
    ordered = sorted(results, key=lambda r: r.client_id)
    raw = np.array([1.0 if uniform else r.weight for r in ordered])
    if raw.sum() <= 0:
        raw = np.ones(len(ordered))
    weights = raw / raw.sum()
    # written as ref + sum a_m (w_m - ref) so identical inputs come back bit-exact
    ref = ordered[0].params
    acc = [a.copy() for a in ref.trainable()]
    for wgt, r in zip(weights, ordered):
        for a, p, q in zip(acc, r.params.trainable(), ref.trainable()):
            a += wgt * (p - q)
    return ref.with_trainable(acc)


def momentum_aggregate(state: ServerState, aggregated: nn.ModelParams, beta: float = 0.5) -> ServerState:
    """``v <- beta v + (agg - w)``; ``w <- w + v``.

    The new weights are formed as ``agg + beta * v_old``, algebraically the same
    update, so that zero velocity or ``beta = 0`` return ``agg`` exactly.
    """
    delta = nn.tree_map(lambda a, w: a - w, aggregated, state.global_params)
    new_velocity = nn.tree_map(lambda v, d: beta * v + d, state.velocity, delta)
    new_params = nn.tree_map(lambda a, v: a + beta * v, aggregated, state.velocity)
    return replace(state, global_params=new_params, velocity=new_velocity)


def _round_report(round_idx: int, lr: float, state: ServerState, results: list[ClientResult], data: FederatedData,
                  sampled: list[int]) -> metrics.RoundReport:
    k = data.num_classes
    test_acc, classwise, ece_val, bins = metrics.evaluate_model(state.global_params, data.test.x, data.test.y)
    truth_parts, label_parts = [], []
    for r in results:
        truth_parts.append(data.clients[r.client_id].hidden_truth[r.pseudo_idx])
        label_parts.append(r.pseudo_labels)
    truth = np.concatenate(truth_parts) if truth_parts else np.zeros(0, dtype=np.int64)
    labels = np.concatenate(label_parts) if label_parts else np.zeros(0, dtype=np.int64)
    pl_acc, empty = metrics.pseudo_label_accuracy(labels, truth)
    n_unlabeled = sum(r.n_unlabeled for r in results)
    iters = sum(r.iterations for r in results)
    losses = {"server": state.server_loss}
    for name in ("pseudo", "unpseudo", "mixup"):
        losses[name] = sum(r.losses[name] for r in results) / iters if iters else 0.0
    return metrics.RoundReport(
        round=round_idx,
        lr=lr,
        test_accuracy=test_acc,
        classwise_accuracy=[float(v) for v in classwise],
        pl_accuracy=pl_acc,
        pl_empty=empty,
        utilization_ratio=metrics.utilization_ratio(labels.size, [n_unlabeled]),
        wrong_label_ratio=0.0 if empty else 1.0 - pl_acc,
        n_pseudo=int(labels.size),
        n_unpseudo=sum(r.n_unpseudo for r in results),
        n_unlabeled=n_unlabeled,
        warmup_clients=sum(r.warmup for r in results),
        sampled_clients=sampled,
        confusion=metrics.confusion_matrix(truth, labels, k).tolist(),
        ece=ece_val,
        bin_stats=[vars(b) for b in bins],
        losses=losses,
    )


def run_round(state: ServerState, data: FederatedData, config: RunConfig, round_idx: int,
              pool: ThreadPoolExecutor | None = None) -> tuple[ServerState, metrics.RoundReport]:
    lr = round_lr(config, round_idx)
    state = server_update(state, data.server, config, round_idx)
    state = update_sbn_stats(state, data.server.x, config)
    sampled = sample_clients(config.clients, config.participation, round_idx, config.seed)
    snapshot = state.global_params

    def work(cid):
        try:
            return client_update(snapshot, data.clients[cid].view(), config, round_idx, cid)
        except TrainingError:
            raise
        except Exception as exc:
            raise TrainingError(f"{type(exc).__name__}: {exc}", round=round_idx, client=cid) from exc

    results = list(pool.map(work, sampled)) if pool is not None else [work(c) for c in sampled]
    results.sort(key=lambda r: r.client_id)
    agg = aggregate(results, uniform=config.aggregation == "uniform")
    state = momentum_aggregate(state, agg, config.global_momentum)
    state.round = round_idx
    if not state.global_params.is_finite():
        raise TrainingError("global weights became non-finite", round=round_idx)
    return state, _round_report(round_idx, lr, state, results, data, sampled)


def run_training(config: RunConfig, data: FederatedData, workers: int = 1,
                 on_round: Callable[[metrics.RoundReport], None] | None = None):
    """Run ``config.rounds`` rounds; returns the final global params and one report per round."""
    if len(data.clients) != config.clients:
        raise ConfigError(f"clients: config expects {config.clients}, data has {len(data.clients)}")
    state = init_state(config, data.dim, data.num_classes)
    reports = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(1, config.rounds + 1):
            state, report = run_round(state, data, config, r, pool)
            reports.append(report)
            log.debug("round %d acc=%.4f pl_acc=%.4f util=%.3f", r, report.test_accuracy,
                      report.pl_accuracy, report.utilization_ratio)
            if on_round is not None:
                on_round(report)
    finally:
        if pool is not None:
            pool.shutdown()
    return state.global_params, reports
