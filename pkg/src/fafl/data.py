"""Datasets: synthetic generation, CSV ingestion and non-IID partitioning."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError, PartitionError

log = logging.getLogger(__name__)


@dataclass(eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    groups: np.ndarray | None = None
    label_names: tuple[str, ...] | None = None
    group_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ConfigError("features must be N x D with one label per row")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("labels must lie in [0, num_classes)")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("features must be finite")
        if self.groups is not None:
            self.groups = np.ascontiguousarray(self.groups, dtype=np.int64)
            if self.groups.shape != self.labels.shape:
                raise ConfigError("group column length must match labels")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def group_ids(self) -> np.ndarray:
        """Sensitive-group ids per sample; the label is used when no group column exists."""
        return self.labels if self.groups is None else self.groups

    @property
    def num_groups(self) -> int:
        if self.groups is None:
            return self.num_classes
        return int(self.groups.max()) + 1 if self.groups.size else 0

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            self.features[idx],
            self.labels[idx],
            self.num_classes,
            None if self.groups is None else self.groups[idx],
            self.label_names,
            self.group_names,
        )

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def generate_synthetic(
    classes: int, features: int, n: int, separation: float, seed: int
) -> LabeledDataset:
    """Class-balanced Gaussian mixture with one unit-variance component per class.

    When ``classes <= features`` the class means sit on scaled coordinate axes so
    that every pair of means is exactly ``separation`` apart; otherwise the
    means use seeded random unit directions of the same radius.
    """
    if classes < 2 or features < 1:
        raise ConfigError("need classes >= 2 and features >= 1")
    if n < classes:
        raise ConfigError(f"n={n} is smaller than the class count {classes}")
    if separation < 0:
        raise ConfigError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    radius = separation / math.sqrt(2.0)
    if classes <= features:
        means = np.zeros((classes, features))
        means[np.arange(classes), np.arange(classes)] = radius
    else:
        dirs = rng.standard_normal((classes, features))
        means = radius * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    labels = np.repeat(np.arange(classes), counts)
    labels = labels[rng.permutation(n)]
    X = means[labels] + rng.standard_normal((n, features))
    return LabeledDataset(X, labels, classes)


def train_holdout_split(
    data: LabeledDataset, fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    """Reserve a random ``fraction`` of the pool as a server-side holdout."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError("holdout fraction must lie in (0,1)")
    n_hold = max(1, int(round(fraction * data.n)))
    if n_hold >= data.n:
        raise ConfigError("holdout would consume the whole dataset")
    perm = np.random.default_rng([seed, 0x401D]).permutation(data.n)
    return data.subset(np.sort(perm[n_hold:])), data.subset(np.sort(perm[:n_hold]))


# ---------------------------------------------------------------------------
# partitioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    alpha: float = 0.4
    max_labels: int = 1
    num_clients: int = 10
    seed: int = 0

    def validate(self, num_classes: int | None = None) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0,1]")
        if self.max_labels < 1:
            raise ConfigError("max_labels must be >= 1")
        if num_classes is not None and self.max_labels > num_classes:
            raise ConfigError(
                f"max_labels={self.max_labels} exceeds the class count {num_classes}"
            )
        if self.num_clients < 2:
            raise ConfigError("num_clients must be >= 2")

    def label_set(self, client: int, num_classes: int) -> tuple[int, ...]:
        start = client * self.max_labels
        return tuple((start + j) % num_classes for j in range(self.max_labels))


@dataclass
class Partition:
    """Sample indices per client, plus which of them came from the restricted draw."""

    indices: list[np.ndarray]
    restricted: list[np.ndarray]
    label_sets: list[tuple[int, ...]]
    resampled: int = 0  # draws that fell back to sampling with replacement


def partition_indices(data: LabeledDataset, spec: PartitionSpec) -> Partition:
    spec.validate(data.num_classes)
    K, N, C = spec.num_clients, data.n, data.num_classes
    if N < K:
        raise PartitionError(f"cannot split {N} samples across {K} clients")
    rng = np.random.default_rng([spec.seed, 0x5EED])
    sizes = np.full(K, N // K)
    sizes[: N % K] += 1
    n_restricted = np.rint(spec.alpha * sizes).astype(np.int64)
    label_sets = [spec.label_set(k, C) for k in range(K)]

    # per-client demand for every restricted label, split evenly over the set
    demand = np.zeros((K, C), dtype=np.int64)
    for k in range(K):
        share, extra = divmod(int(n_restricted[k]), spec.max_labels)
        for j, c in enumerate(label_sets[k]):
            demand[k, c] += share + (1 if j < extra else 0)

    used = np.zeros(N, dtype=bool)
    restricted_draws: list[list[np.ndarray]] = [[] for _ in range(K)]
    resampled = 0
    for c in range(C):
        pool = np.flatnonzero(data.labels == c)
        pool = pool[rng.permutation(pool.size)]
        cursor = 0
        for k in range(K):
            need = int(demand[k, c])
            if need == 0:
                continue
            take = pool[cursor : cursor + need]
            cursor += take.size
            short = need - take.size
            if short > 0:
                if pool.size == 0:
                    raise PartitionError(f"class {c} has no samples for a restricted draw")
                take = np.concatenate([take, pool[rng.integers(0, pool.size, size=short)]])
                resampled += short
            used[take] = True
            restricted_draws[k].append(take)
        if cursor < demand[:, c].sum():
            log.warning("class %d oversubscribed: sampling %d draws with replacement", c,
                        int(demand[:, c].sum() - cursor))

    free = np.flatnonzero(~used)
    free = free[rng.permutation(free.size)]
    cursor = 0
    indices, restricted = [], []
    for k in range(K):
        r = (np.concatenate(restricted_draws[k]) if restricted_draws[k]
             else np.zeros(0, dtype=np.int64))
        need = int(sizes[k] - r.size)
        iid = free[cursor : cursor + need]
        cursor += iid.size
        idx = np.concatenate([r, iid]).astype(np.int64)
        indices.append(idx)
        restricted.append(np.concatenate([np.ones(r.size, bool), np.zeros(iid.size, bool)]))
    return Partition(indices, restricted, label_sets, resampled)


def partition_noniid(data: LabeledDataset, spec: PartitionSpec) -> list[LabeledDataset]:
    """Split ``data`` into ``spec.num_clients`` shards of floor(N/K) or ceil(N/K) samples.

    A fraction ``alpha`` of every shard is drawn only from the client's
    round-robin label set (``max_labels`` classes); the rest is drawn IID from
    whatever the restricted draws left in the pool.
    """
    part = partition_indices(data, spec)
    return [data.subset(idx) for idx in part.indices]


@dataclass
class ShardStats:
    histograms: np.ndarray  # K x C label counts
    mean_tv: float
    sizes: list[int] = field(default_factory=list)

    @property
    def distributions(self) -> np.ndarray:
        totals = self.histograms.sum(axis=1, keepdims=True)
        return self.histograms / np.maximum(totals, 1)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def shard_stats(shards: list[LabeledDataset]) -> ShardStats:
    if not shards:
        raise PartitionError("no shards to summarise")
    C = max(s.num_classes for s in shards)
    hist = np.stack([np.bincount(s.labels, minlength=C) for s in shards])
    stats = ShardStats(hist, 0.0, [s.n for s in shards])
    dist = stats.distributions
    pairs = list(combinations(range(len(shards)), 2))
    if pairs:
        stats.mean_tv = sum(total_variation(dist[i], dist[j]) for i, j in pairs) / len(pairs)
    return stats


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_csv_dataset(
    path: str | Path, label_column: str, group_column: str | None = None
) -> LabeledDataset:
    """Read a headed, comma-separated UTF-8 file.

    Every column other than the label/group columns must be numeric.  Rows
    with an unparseable or non-finite value are skipped and reported by their
    1-based data row index.  Labels and groups are factorised in
    first-appearance order.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: zero valid rows")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise IngestionError(f"{path}: missing label column {label_column!r}")
        if group_column is not None and group_column not in header:
            raise IngestionError(f"{path}: missing group column {group_column!r}")
        li = header.index(label_column)
        gi = header.index(group_column) if group_column is not None else None
        fcols = [i for i in range(len(header)) if i != li and i != gi]
        rows, labels, groups, rejected = [], [], [], []
        for rowno, row in enumerate(reader, start=1):
            if not row:
                continue
            try:
                if len(row) != len(header):
                    raise ValueError("column count")
                vals = [float(row[i]) for i in fcols]
                if not all(math.isfinite(v) for v in vals):
                    raise ValueError("non-finite")
            except ValueError:
                rejected.append(rowno)
                continue
            rows.append(vals)
            labels.append(row[li].strip())
            if gi is not None:
                groups.append(row[gi].strip())
    if rejected:
        log.warning("%s: rejected rows %s", path, rejected)
    if not rows:
        raise IngestionError(f"{path}: zero valid rows")
    label_names = tuple(dict.fromkeys(labels))
    lmap = {name: i for i, name in enumerate(label_names)}
    group_arr, group_names = None, None
    if gi is not None:
        group_names = tuple(dict.fromkeys(groups))
        gmap = {name: i for i, name in enumerate(group_names)}
        group_arr = np.array([gmap[g] for g in groups], dtype=np.int64)
    return LabeledDataset(
        np.array(rows, dtype=np.float64).reshape(len(rows), len(fcols)),
        np.array([lmap[x] for x in labels], dtype=np.int64),
        len(label_names),
        group_arr,
        label_names,
        group_names,
    )


def write_csv_dataset(data: LabeledDataset, path: str | Path) -> None:
    """Write ``data`` so that :func:`load_csv_dataset` reproduces the features bit-exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        head = [f"x{j}" for j in range(data.num_features)] + ["label"]
        if data.groups is not None:
            head.append("group")
        w.writerow(head)
        names = data.label_names
        for i in range(data.n):
            lab = int(data.labels[i])
            row = [repr(float(v)) for v in data.features[i]]
            row.append(names[lab] if names else str(lab))
            if data.groups is not None:
                gn = data.group_names
                g = int(data.groups[i])
                row.append(gn[g] if gn else str(g))
            w.writerow(row)
