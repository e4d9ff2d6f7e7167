"""Synthetic blobs, server/client splits, IID and Dirichlet partitions, vector augmentations.

Every sample keeps a stable integer ``id`` (its row in the generated set) so that
partitions can be checked for exact cover and per-sample random streams can be
keyed independently of which client holds the sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .seeding import derive_seed

DATASET_FORMAT = "ssfl-dataset"
DATASET_VERSION = 1


@dataclass(frozen=True)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    ids: np.ndarray

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0] or self.ids.shape[0] != self.y.shape[0]:
            raise ValueError("x, y and ids must have the same length")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return self.y.shape[0]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.x[idx], self.y[idx], self.num_classes, self.ids[idx])


@dataclass(frozen=True)
class SampleView:
    """What training code is allowed to see of a client: ids and features only."""

    ids: np.ndarray
    x: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]


@dataclass(frozen=True)
class UnlabeledDataset:
    x: np.ndarray
    hidden_truth: np.ndarray  # metrics only
    num_classes: int
    ids: np.ndarray

    def __post_init__(self):
        if not (self.x.shape[0] == self.hidden_truth.shape[0] == self.ids.shape[0]):
            raise ValueError("x, hidden_truth and ids must have the same length")

    def __len__(self) -> int:
        return self.ids.shape[0]

    def subset(self, idx: np.ndarray) -> "UnlabeledDataset":
        return UnlabeledDataset(self.x[idx], self.hidden_truth[idx], self.num_classes, self.ids[idx])

    def view(self) -> SampleView:
        return SampleView(self.ids, self.x)


@dataclass(frozen=True)
class PartitionSpec:
    client_count: int
    mode: str = "iid"  # "iid" or "dirichlet"
    alpha: float = 1.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.client_count < 1:
            problems.append("client_count must be positive")
        if self.mode not in ("iid", "dirichlet"):
            problems.append(f"partition mode must be 'iid' or 'dirichlet', got {self.mode!r}")
        if self.mode == "dirichlet" and not self.alpha > 0:
            problems.append("dirichlet alpha must be > 0")
        if problems:
            raise ConfigError(problems)


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise_std: float = 0.05
    strong_noise_std: float = 0.2
    strong_mask_fraction: float = 0.2

    def __post_init__(self):
        problems = []
        if self.weak_noise_std < 0:
            problems.append("weak_noise_std must be >= 0")
        if self.strong_noise_std < self.weak_noise_std:
            problems.append("strong_noise_std must be >= weak_noise_std")
        if not 0 <= self.strong_mask_fraction < 1:
            problems.append("strong_mask_fraction must lie in [0, 1)")
        if problems:
            raise ConfigError(problems)


def gen_blobs(num_classes: int, dim: int, n_per_class: int, spread: float, seed: int,
              separation: float = 3.0) -> LabeledDataset:
    """Isotropic Gaussian classes around random unit directions scaled by ``separation``."""
    if num_classes < 2 or dim < 2 or n_per_class < 1:
        raise ConfigError("gen_blobs needs K >= 2, d >= 2, n_per_class >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = centers[y] + spread * rng.standard_normal((y.size, dim))
    order = rng.permutation(y.size)
    return LabeledDataset(x[order], y[order], num_classes, np.arange(y.size))


def train_test_split(full: LabeledDataset, test_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Class-stratified hold-out split."""
    if not 0 <= test_fraction < 1:
        raise ConfigError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    for k in range(full.num_classes):
        members = np.flatnonzero(full.y == k)
        n_test = int(round(test_fraction * members.size))
        test_idx.append(rng.permutation(members)[:n_test])
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(len(full), dtype=bool)
    train_mask[test_idx] = False
    return full.subset(np.flatnonzero(train_mask)), full.subset(test_idx)


def split_server_labels(full: LabeledDataset, n_labeled: int, seed: int) -> tuple[LabeledDataset, UnlabeledDataset]:
    """Draw ``n_labeled / K`` labeled samples per class; the rest becomes the unlabeled pool."""
    k = full.num_classes
    if n_labeled % k != 0:
        raise ConfigError(f"n_labeled={n_labeled} must be a multiple of the class count {k}")
    if n_labeled > len(full):
        raise ConfigError(f"n_labeled={n_labeled} exceeds dataset size {len(full)}")
    per_class = n_labeled // k
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(k):
        members = np.flatnonzero(full.y == c)
        if members.size < per_class:
            raise ConfigError(f"class {c} has only {members.size} samples, need {per_class}")
        chosen.append(rng.permutation(members)[:per_class])
    chosen = np.sort(np.concatenate(chosen)) if chosen else np.array([], dtype=int)
    rest = np.setdiff1d(np.arange(len(full)), chosen)
    server = full.subset(chosen)
    pool = UnlabeledDataset(full.x[rest], full.y[rest], k, full.ids[rest])
    return server, pool


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of ``total`` that sums exactly and follows ``proportions``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        frac = raw - counts
        order = np.argsort(-frac, kind="stable")
        counts[order[:short]] += 1
    return counts


def iid_partition(pool: UnlabeledDataset, spec: PartitionSpec) -> list[UnlabeledDataset]:
    if spec.mode != "iid":
        raise ConfigError("iid_partition called with a non-iid spec")
    if spec.client_count > len(pool):
        raise ConfigError(f"cannot give {spec.client_count} clients at least one of {len(pool)} samples")
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(pool))
    return [pool.subset(np.sort(part)) for part in np.array_split(perm, spec.client_count)]


def dirichlet_partition(pool: UnlabeledDataset, spec: PartitionSpec, max_redraws: int = 100) -> list[UnlabeledDataset]:
    """Per-class label skew: class ``k`` is spread over clients by ``p_k ~ Dir(alpha 1_M)``."""
    if spec.mode != "dirichlet":
        raise ConfigError("dirichlet_partition called with a non-dirichlet spec")
    m = spec.client_count
    rng = np.random.default_rng(spec.seed)
    truth = pool.hidden_truth
    by_class = [rng.permutation(np.flatnonzero(truth == k)) for k in range(pool.num_classes)]
    for _ in range(max_redraws):
        parts: list[list[np.ndarray]] = [[] for _ in range(m)]
        for members in by_class:
            if members.size == 0:
                continue
            counts = largest_remainder(rng.dirichlet(np.full(m, spec.alpha)), members.size)
            start = 0
            for client, c in enumerate(counts):
                parts[client].append(members[start:start + c])
                start += c
        sizes = [sum(p.size for p in client_parts) for client_parts in parts]
        if min(sizes) > 0:
            return [pool.subset(np.sort(np.concatenate(p))) for p in parts]
    raise ConfigError(f"dirichlet partition left a client empty after {max_redraws} redraws "
                      f"(alpha={spec.alpha}, clients={m}, pool={len(pool)})")


def partition(pool: UnlabeledDataset, spec: PartitionSpec) -> list[UnlabeledDataset]:
    if spec.mode == "iid":
        return iid_partition(pool, spec)
    return dirichlet_partition(pool, spec)


def weak_augment(x: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if config.weak_noise_std == 0:
        return x.copy()
    return x + config.weak_noise_std * rng.standard_normal(x.shape)


def mask_count(dim: int, fraction: float) -> int:
    return int(round(fraction * dim))


def strong_augment(x: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise, then zero a uniformly random ``strong_mask_fraction`` of coordinates per sample."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    out = xb + config.strong_noise_std * rng.standard_normal(xb.shape) if config.strong_noise_std else xb.copy()
    n_mask = mask_count(xb.shape[1], config.strong_mask_fraction)
    if n_mask:
        cols = np.argsort(rng.random(xb.shape), axis=1)[:, :n_mask]
        np.put_along_axis(out, cols, 0.0, axis=1)
    return out[0] if single else out


@dataclass(frozen=True)
class FederatedData:
    server: LabeledDataset
    clients: list[UnlabeledDataset]
    test: LabeledDataset

    @property
    def num_classes(self) -> int:
        return self.server.num_classes

    @property
    def dim(self) -> int:
        return self.server.x.shape[1]


def build_federated_data(num_classes: int, dim: int, n_per_class: int, spread: float, separation: float,
                         test_fraction: float, n_labeled: int, partition_spec: PartitionSpec,
                         seed: int) -> FederatedData:
    """Generate blobs and carve out test, server-labeled and per-client unlabeled sets."""
    def child(tag):
        return int(derive_seed(seed, tag).generate_state(1)[0])

    full = gen_blobs(num_classes, dim, n_per_class, spread, child("blobs"), separation)
    train, test = train_test_split(full, test_fraction, child("test-split"))
    server, pool = split_server_labels(train, n_labeled, child("label-split"))
    spec = PartitionSpec(partition_spec.client_count, partition_spec.mode, partition_spec.alpha, child("partition"))
    return FederatedData(server, partition(pool, spec), test)


# --- line-delimited text export -------------------------------------------------
#
# header: "# ssfl-dataset v1 kind=<labeled|unlabeled> classes=<K> dim=<d>"
# rows:   "<id>\t<f_1> ... <f_d>\t<label>"   labeled
#         "<id>\t<f_1> ... <f_d>\t?<truth>"  unlabeled; '?' marks hidden truth
# floats are written with repr() so a round trip is bit-exact.

def save_dataset(ds: LabeledDataset | UnlabeledDataset, path: str | Path) -> None:
    labeled = isinstance(ds, LabeledDataset)
    labels = ds.y if labeled else ds.hidden_truth
    marker = "" if labeled else "?"
    lines = [f"# {DATASET_FORMAT} v{DATASET_VERSION} kind={'labeled' if labeled else 'unlabeled'} "
             f"classes={ds.num_classes} dim={ds.x.shape[1]}"]
    for i, row, lab in zip(ds.ids, ds.x, labels):
        feats = " ".join(repr(float(v)) for v in row)
        lines.append(f"{int(i)}\t{feats}\t{marker}{int(lab)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> LabeledDataset | UnlabeledDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(f"# {DATASET_FORMAT} v"):
        raise ValueError(f"{path}: missing {DATASET_FORMAT} header")
    fields = dict(tok.split("=", 1) for tok in lines[0].split()[3:])
    kind, k, d = fields["kind"], int(fields["classes"]), int(fields["dim"])
    ids, xs, labels = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        sid, feats, lab = line.split("\t")
        row = [float(v) for v in feats.split()]
        if len(row) != d:
            raise ValueError(f"{path}:{lineno}: expected {d} features, got {len(row)}")
        if (kind == "unlabeled") != lab.startswith("?"):
            raise ValueError(f"{path}:{lineno}: label marker does not match kind={kind}")
        ids.append(int(sid))
        xs.append(row)
        labels.append(int(lab.lstrip("?")))
    x = np.array(xs, dtype=np.float64).reshape(len(xs), d)
    ids_a = np.array(ids, dtype=np.int64)
    lab_a = np.array(labels, dtype=np.int64)
    if kind == "labeled":
        return LabeledDataset(x, lab_a, k, ids_a)
    return UnlabeledDataset(x, lab_a, k, ids_a)


def concat_unlabeled(parts: Sequence[UnlabeledDataset]) -> UnlabeledDataset:
    return UnlabeledDataset(np.concatenate([p.x for p in parts]), np.concatenate([p.hidden_truth for p in parts]),
                            parts[0].num_classes, np.concatenate([p.ids for p in parts]))
