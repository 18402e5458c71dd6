"""Synthetic datasets, Dirichlet non-iid partitioning, staleness-target
selection, and streaming replacement for the variant-data scenario."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, Dataset


class PartitionError(RuntimeError):
    """Raised when the empty-client repair loop gives up."""


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")


@dataclass(frozen=True)
class StalenessPlan:
    target_class: int
    num_stale_clients: int = 10
    staleness_epochs: int = 0

    def __post_init__(self):
        if self.target_class < 0:
            raise ConfigError("target_class must be >= 0")
        if self.num_stale_clients < 1:
            raise ConfigError("num_stale_clients must be >= 1")
        if self.staleness_epochs < 0:
            raise ConfigError("staleness_epochs must be >= 0")


@dataclass
class VariationSpec:
    """Streaming replacement: rate samples per epoch, drawn from pool.

    Fractional rates accumulate, so over E epochs exactly round(rate*E)
    samples have been replaced.
    """

    rate: float
    pool: Dataset
    seed: int = 0

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigError("variation rate must be >= 0")
        if self.pool.n < 1:
            raise ConfigError("variation pool must be nonempty")


def make_blobs(num_classes: int, dim: int, samples_per_class: int, spread: float,
               seed: int = 0) -> Dataset:
    """Gaussian class clusters with centers drawn once from the seed.

    Features are clipped to [0,1]; rows come out class-major. Centers and
    sample noise use separate seed streams so datasets of different sizes
    share the same geometry for the same seed.
    """
    if num_classes < 1 or dim < 1 or samples_per_class < 1:
        raise ConfigError("num_classes, dim and samples_per_class must be positive")
    if spread < 0:
        raise ConfigError("spread must be >= 0")
    center_rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xC0]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xC1]))
    centers = center_rng.uniform(0.1, 0.9, (num_classes, dim))
    feats = np.vstack([
        np.clip(c + noise_rng.normal(0.0, spread, (samples_per_class, dim)), 0.0, 1.0)
        for c in centers
    ])
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    return Dataset(feats, labels, num_classes)


def dirichlet_partition(dataset: Dataset, spec: PartitionSpec,
                        max_retries: int = 100) -> list[Dataset]:
    """Split each class across clients by a Dirichlet(alpha,...) draw.

    The union of the partitions is the dataset, disjoint. If any client
    comes out empty the whole partition is resampled (preserves the
    Dirichlet shape) up to max_retries times.
    """
    if dataset.is_soft:
        raise ValueError("dirichlet_partition needs hard labels")
    labels = dataset.hard_labels()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF, 0xD1]))
    for _ in range(max_retries):
        assignment = [[] for _ in range(spec.num_clients)]
        for c in range(dataset.num_classes):
            class_idx = np.where(labels == c)[0]
            if class_idx.size == 0:
                continue
            class_idx = rng.permutation(class_idx)
            props = rng.dirichlet(np.full(spec.num_clients, spec.alpha))
            cuts = np.floor(np.cumsum(props) * class_idx.size).astype(int)[:-1]
            for client, chunk in enumerate(np.split(class_idx, cuts)):
                assignment[client].extend(chunk.tolist())
        if all(len(a) >= 1 for a in assignment):
            return [dataset.subset(np.array(sorted(a), dtype=int)) for a in assignment]
    raise PartitionError(
        f"could not give every one of {spec.num_clients} clients a sample "
        f"after {max_retries} retries (alpha={spec.alpha}, n={dataset.n})"
    )


def select_stale_clients(partitions: list[Dataset], plan: StalenessPlan) -> list[int]:
    """Ids of the num_stale_clients clients holding the most target-class
    samples; ties break toward the lower client id. Returned sorted."""
    num_classes = partitions[0].num_classes
    if plan.target_class >= num_classes:
        raise ConfigError(f"target_class {plan.target_class} >= num_classes {num_classes}")
    if plan.num_stale_clients > len(partitions):
        raise ConfigError(
            f"num_stale_clients {plan.num_stale_clients} > num_clients {len(partitions)}"
        )
    counts = [int(np.sum(p.hard_labels() == plan.target_class)) for p in partitions]
    order = sorted(range(len(partitions)), key=lambda i: (-counts[i], i))
    return sorted(order[:plan.num_stale_clients])


def apply_variation(client_data: Dataset, spec: VariationSpec, epoch: int) -> Dataset:
    """Dataset for `epoch` after this epoch's replacements.

    Cumulative replacements after epoch e are round(rate*e); the rows to
    replace follow a fixed seed-derived permutation (wrapping when every row
    has been touched), so fractional rates accumulate and draws stay distinct
    until the dataset has turned over. Pure in (client_data, spec, epoch).
    """
    if spec.pool.dim != client_data.dim or spec.pool.num_classes != client_data.num_classes:
        raise ValueError("variation pool shape does not match the client dataset")
    if epoch < 1:
        return client_data
    done_before = int(round(spec.rate * (epoch - 1)))
    done_after = int(round(spec.rate * epoch))
    k = done_after - done_before
    if k <= 0:
        return client_data
    n = client_data.n
    perm = np.random.default_rng(
        np.random.SeedSequence([spec.seed & 0xFFFFFFFF, 0xE0])).permutation(n)
    rows = perm[[(done_before + j) % n for j in range(k)]]
    draw_rng = np.random.default_rng(
        np.random.SeedSequence([spec.seed & 0xFFFFFFFF, 0xE1, epoch]))
    picks = draw_rng.integers(0, spec.pool.n, size=k)

    feats = client_data.features.copy()
    feats[rows] = spec.pool.features[picks]
    if client_data.is_soft or spec.pool.is_soft:
        labels = np.asarray(client_data.soft_labels(), dtype=np.float64).copy()
        labels[rows] = spec.pool.soft_labels()[picks]
    else:
        labels = client_data.labels.copy()
        labels[rows] = spec.pool.labels[picks]
    return Dataset(feats, labels, client_data.num_classes)


def load_csv_dataset(path, num_classes: int | None = None) -> Dataset:
    """Read `f0..f{d-1},label` CSV: features clipped to [0,1], integer labels."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if [h.strip() for h in header] != expected:
            raise ValueError(f"{path}: header must be f0..f{d-1},label")
        feats, labels = [], []
        for row in reader:
            if not row:
                continue
            if len(row) != d + 1:
                raise ValueError(f"{path}: row with {len(row)} fields, expected {d + 1}")
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    if not feats:
        raise ValueError(f"{path}: no data rows")
    labels = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(np.clip(np.array(feats), 0.0, 1.0), labels, num_classes)
