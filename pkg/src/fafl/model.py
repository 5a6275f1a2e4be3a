"""Small differentiable classifiers, local SGD and evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .data import LabeledDataset
from .errors import ConfigError, EvaluationError, TrainingError


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor: ``hidden == 0`` means softmax-linear."""

    in_dim: int
    hidden: int
    classes: int

    def __post_init__(self):
        if self.in_dim < 1 or self.hidden < 0 or self.classes < 2:
            raise ConfigError(
                f"invalid architecture (in_dim={self.in_dim}, hidden={self.hidden}, "
                f"classes={self.classes})"
            )

    @classmethod
    def linear(cls, in_dim: int, classes: int) -> "Arch":
        return cls(in_dim, 0, classes)

    @classmethod
    def mlp(cls, in_dim: int, hidden: int, classes: int) -> "Arch":
        if hidden < 1:
            raise ConfigError("mlp hidden width must be >= 1")
        return cls(in_dim, hidden, classes)

    @property
    def size(self) -> int:
        return kernels.param_count(self.in_dim, self.hidden, self.classes)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.in_dim, self.hidden, self.classes


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    arch: Arch

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.arch.size:
            raise ConfigError(
                f"parameter vector length {v.size} does not match architecture size {self.arch.size}"
            )
        if not np.all(np.isfinite(v)):
            raise TrainingError("parameter vector contains non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.arch)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    decay: float = 0.992
    batch_size: int = 64
    local_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0", "learning_rate")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0,1]", "decay")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "batch_size")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1", "local_epochs")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer", "seed")

    def step_size(self, round: int) -> float:
        """Learning rate in effect at a federated round (decay applied per round)."""
        return self.learning_rate * self.decay**round


class Evaluation(NamedTuple):
    accuracy: float
    mean_loss: float
    per_group_loss: dict[int, float]


def init_model(arch: Arch, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for every weight and bias."""
    rng = np.random.default_rng(seed)
    D, H, C = arch.dims
    if H == 0:
        bound = 1.0 / math.sqrt(D)
        values = rng.uniform(-bound, bound, size=arch.size)
    else:
        b1 = 1.0 / math.sqrt(D)
        b2 = 1.0 / math.sqrt(H)
        first = D * H + H
        values = np.concatenate(
            [rng.uniform(-b1, b1, size=first), rng.uniform(-b2, b2, size=arch.size - first)]
        )
    return ParamVector(values, arch)


def _check_dims(w: ParamVector, data: LabeledDataset) -> None:
    if data.num_features != w.arch.in_dim:
        raise ConfigError(
            f"feature dimension {data.num_features} does not match model input {w.arch.in_dim}"
        )
    if data.num_classes > w.arch.classes:
        raise ConfigError(
            f"dataset has {data.num_classes} classes but model outputs {w.arch.classes}"
        )


_NO_DUALS = np.zeros(0)


def loss_and_grad(
    w: ParamVector,
    batch: LabeledDataset,
    duals: np.ndarray | None = None,
    zeta: float = 0.0,
    groups: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (plus optional group-loss hinge penalty) and its exact gradient."""
    if batch.n == 0:
        raise TrainingError("empty batch")
    _check_dims(w, batch)
    lam = _NO_DUALS if duals is None else np.asarray(duals, dtype=np.float64)
    g = batch.group_ids() if groups is None else np.asarray(groups, dtype=np.int64)
    loss, grad = kernels.ACTIVE.loss_grad(
        w.values, batch.features, batch.labels, g, lam, float(zeta), *w.arch.dims
    )
    return float(loss), grad


def local_train(
    w: ParamVector,
    shard: LabeledDataset,
    cfg: TrainConfig,
    round: int,
    *,
    duals: np.ndarray | None = None,
    zeta: float = 0.0,
    fraction: float = 1.0,
) -> tuple[ParamVector, np.ndarray, float]:
    """Run ``cfg.local_epochs`` epochs of mini-batch SGD starting from ``w``.

    Each epoch visits a seeded permutation of the shard (the last short batch
    is kept).  ``fraction`` < 1 restricts every epoch to a prefix of that
    permutation; ``fraction == 0`` skips training entirely.  Non-empty
    ``duals`` switch the objective to the bounded-group-loss penalised form.

    Returns ``(w_new, delta, local_loss)`` where ``w_new = w + delta`` holds
    exactly and ``local_loss`` is the sample-weighted mean batch loss of the
    final epoch.
    """
    if shard.n == 0:
        raise TrainingError("cannot train on an empty shard")
    if round < 0:
        raise ConfigError("round must be >= 0")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("data fraction must lie in [0,1]")
    _check_dims(w, shard)
    lam = _NO_DUALS if duals is None else np.asarray(duals, dtype=np.float64)
    groups = shard.group_ids()
    params = w.values.copy()
    lr = cfg.step_size(round)
    n_used = 0 if fraction == 0.0 else max(1, math.ceil(fraction * shard.n))
    rng = np.random.default_rng([cfg.seed, round])
    loss = float("nan")
    if n_used:
        for _ in range(cfg.local_epochs):
            order = rng.permutation(shard.n)[:n_used].astype(np.int64)
            loss = kernels.ACTIVE.sgd_epoch(
                params, shard.features, shard.labels, groups, lam, float(zeta),
                order, cfg.batch_size, lr, *w.arch.dims,
            )
    else:
        loss = evaluate(w, shard).mean_loss
    delta = params - w.values
    w_new = w.with_values(w.values + delta)
    return w_new, delta, float(loss)


def predict(w: ParamVector, features: np.ndarray) -> np.ndarray:
    logits = kernels.ACTIVE.forward(w.values, features, *w.arch.dims)
    # np.argmax resolves ties toward the lowest class index
    return np.argmax(logits, axis=1)


def evaluate(
    w: ParamVector, data: LabeledDataset, groups: np.ndarray | None = None
) -> Evaluation:
    if data.n == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    _check_dims(w, data)
    D, H, C = w.arch.dims
    logits = kernels.ACTIVE.forward(w.values, data.features, D, H, C)
    pred = np.argmax(logits, axis=1)
    ce = kernels.ACTIVE.per_sample_loss(w.values, data.features, data.labels, D, H, C)
    g = data.group_ids() if groups is None else np.asarray(groups, dtype=np.int64)
    per_group = {int(k): float(ce[g == k].mean()) for k in np.unique(g)}
    return Evaluation(float(np.mean(pred == data.labels)), float(ce.mean()), per_group)
