"""Synthetic classification tasks with analytic gradients.

Provides Gaussian-cluster datasets, Dirichlet non-IID partitioning into
device shards, two small model families (linear softmax and a one-hidden-
layer tanh MLP) with exact cross-entropy gradients, mini-batch SGD epochs,
and evaluation. All randomness flows through explicit numpy generators.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import UsageError


@dataclass(frozen=True)
class Dataset:
    """Feature matrix [n, s] with integer labels in [0, n_classes)."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise UsageError("features must be a 2-D matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise UsageError("labels must align with feature rows")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise UsageError("labels out of range")
        if not np.all(np.isfinite(self.features)):
            raise UsageError("features contain NaN/Inf")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def take(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


@dataclass(frozen=True)
class ModelSpec:
    """Model family and dimensions; fixes the flat parameter layout."""

    kind: str  # "linear-softmax" | "mlp-1hidden"
    input_dim: int
    n_classes: int
    hidden: int = 16

    def __post_init__(self):
        if self.kind not in ("linear-softmax", "mlp-1hidden"):
            raise UsageError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.n_classes < 2:
            raise UsageError("need input_dim >= 1 and n_classes >= 2")
        if self.kind == "mlp-1hidden" and self.hidden < 1:
            raise UsageError("hidden size must be positive")

    @property
    def dim(self) -> int:
        c, s, h = self.n_classes, self.input_dim, self.hidden
        if self.kind == "linear-softmax":
            return c * s + c
        return h * s + h + c * h + c


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    mean_loss: float


# ---------- data generation and partitioning ----------

def generate_synthetic(n: int, s: int, n_classes: int, class_sep: float,
                       seed: int) -> Dataset:
    """Gaussian clusters around n_classes random centroids scaled by class_sep.

    Class counts are balanced (within one sample) so every class is present.
    """
    if n < n_classes:
        raise UsageError(f"need n >= n_classes, got n={n}, C={n_classes}")
    if class_sep <= 0:
        raise UsageError("class_sep must be positive")
    rng = np.random.default_rng(seed)
    centroids = class_sep * rng.normal(size=(n_classes, s))
    labels = np.arange(n, dtype=np.int64) % n_classes
    rng.shuffle(labels)
    features = centroids[labels] + rng.normal(size=(n, s))
    return Dataset(np.ascontiguousarray(features), labels, n_classes)


def split_holdout(d: Dataset, test_fraction: float, seed: int):
    """IID train/test split; the test side is never partitioned."""
    if not 0.0 < test_fraction < 1.0:
        raise UsageError("test_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(d))
    n_test = max(1, int(round(test_fraction * len(d))))
    return d.take(perm[n_test:]), d.take(perm[:n_test])


def dirichlet_partition(d: Dataset, m: int, alpha_dir: float, seed: int) -> list[Dataset]:
    """Split a dataset into m shards with Dirichlet(alpha_dir) class skew.

    Each class's samples are scattered over devices with multinomial counts
    drawn from a Dirichlet proportion vector. The shards partition the input
    exactly; empty shards are repaired by stealing one sample from the
    largest shard.
    """
    if m < 1:
        raise UsageError("need at least one device")
    if m > len(d):
        raise UsageError(f"cannot split {len(d)} samples over {m} devices")
    if alpha_dir <= 0:
        raise UsageError("alpha_dir must be positive")
    rng = np.random.default_rng(seed)
    assignments: list[list[np.ndarray]] = [[] for _ in range(m)]
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(m, alpha_dir))
        counts = rng.multinomial(len(idx), props)
        start = 0
        for dev in range(m):
            assignments[dev].append(idx[start : start + counts[dev]])
            start += counts[dev]
    shard_idx = [np.concatenate(parts) for parts in assignments]
    # steal-one repair: every device must be able to train
    while True:
        empties = [i for i, ix in enumerate(shard_idx) if len(ix) == 0]
        if not empties:
            break
        donor = max(range(m), key=lambda i: len(shard_idx[i]))
        shard_idx[empties[0]] = shard_idx[donor][-1:]
        shard_idx[donor] = shard_idx[donor][:-1]
    return [d.take(np.sort(ix)) for ix in shard_idx]


# ---------- model math ----------

def init_params(spec: ModelSpec, seed: int, scale: float = 0.01) -> np.ndarray:
    """Small Gaussian init (breaks MLP symmetry; near-uniform softmax)."""
    rng = np.random.default_rng(seed)
    return scale * rng.normal(size=spec.dim)


def _check_model_inputs(spec: ModelSpec, w: np.ndarray, d: Dataset) -> None:
    if w.shape != (spec.dim,):
        raise UsageError(f"weight dim {w.shape} does not match spec dim {spec.dim}")
    if d.n_features != spec.input_dim or d.n_classes != spec.n_classes:
        raise UsageError("dataset shape does not match model spec")
    if len(d) == 0:
        raise UsageError("empty batch")


def loss_and_grad(spec: ModelSpec, w: np.ndarray, batch: Dataset):
    """Mean cross-entropy and its exact gradient on a batch."""
    _check_model_inputs(spec, w, batch)
    if spec.kind == "linear-softmax":
        return _kernels.linear_loss_grad(w, batch.features, batch.labels, spec.n_classes)
    return _kernels.mlp_loss_grad(w, batch.features, batch.labels,
                                  spec.n_classes, spec.hidden)


def sgd_epoch(spec: ModelSpec, w: np.ndarray, shard: Dataset, eta: float,
              batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """One pass of mini-batch SGD over a seeded shuffle of the shard."""
    _check_model_inputs(spec, w, shard)
    if eta < 0:
        raise UsageError("learning rate must be non-negative")
    if batch_size < 1:
        raise UsageError("batch_size must be positive")
    order = rng.permutation(len(shard)).astype(np.int64)
    if spec.kind == "linear-softmax":
        return _kernels.linear_sgd_epoch(w, shard.features, shard.labels,
                                         spec.n_classes, eta, order, batch_size)
    return _kernels.mlp_sgd_epoch(w, shard.features, shard.labels, spec.n_classes,
                                  spec.hidden, eta, order, batch_size)


def first_batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Leading indices of the shuffle an sgd_epoch with this rng would use."""
    return rng.permutation(n).astype(np.int64)[:batch_size]


def predict(spec: ModelSpec, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    c, s = spec.n_classes, spec.input_dim
    if spec.kind == "linear-softmax":
        logits = X @ w[: c * s].reshape(c, s).T + w[c * s :]
    else:
        h = spec.hidden
        o1, o2, o3 = h * s, h * s + h, h * s + h + c * h
        hid = np.tanh(X @ w[:o1].reshape(h, s).T + w[o1:o2])
        logits = hid @ w[o2:o3].reshape(c, h).T + w[o3:]
    return np.argmax(logits, axis=1)


def evaluate(spec: ModelSpec, w: np.ndarray, test: Dataset) -> EvalReport:
    """Top-1 accuracy and mean loss on a test set."""
    _check_model_inputs(spec, w, test)
    loss, _ = loss_and_grad(spec, w, test)
    acc = float(np.mean(predict(spec, w, test.features) == test.labels))
    return EvalReport(accuracy=acc, mean_loss=loss)


# ---------- CSV import/export ----------

def dataset_to_csv(d: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(d.n_features)] + ["label"])
        for row, label in zip(d.features, d.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def dataset_from_csv(path, n_classes: int) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise UsageError(f"{path}: expected header f0..f{{s-1}},label")
        feats, labels = [], []
        for row in reader:
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    return Dataset(np.asarray(feats, dtype=np.float64),
                   np.asarray(labels, dtype=np.int64), n_classes)
