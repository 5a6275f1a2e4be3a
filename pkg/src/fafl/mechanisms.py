"""Aggregation strategies: FedAvg plus five fairness-aware variants.

A mechanism is driven by the simulation engine through four hooks, always in
this order within a round:

``select``        which clients take part (returns a boolean indicator per client)
``local_options`` extra keyword arguments for a client's local training
``aggregate``     combine the verified client updates into new global weights
``feedback``      post-round state updates (reputations, duals, mixture, bandit
                  statistics, payouts)

Mechanism state lives in :class:`RoundState` and on the client profiles and is
only mutated from the server side, after all client legs of the round have
returned.  The free functions below are the pure building blocks.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import LabeledDataset
from .errors import AggregationError, ConfigError
from .model import ParamVector, TrainConfig, local_train, loss_and_grad

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
DEGRADATION_SCALE = 0.05
PAYOUT_WINDOW = 10
EFFORT_FLOOR = 1e-3


@dataclass(frozen=True)
class MechanismConfig:
    gamma: float = 1.0
    rho: float = 0.5
    epsilon: float = 0.2
    zeta: float = 0.6
    dual_step: float = 0.1
    mixture_step: float = 0.01
    beta: float = 0.2
    select: int = 5
    budget: float = 10.0
    cost_coeff: float = 1.0
    initial_reputation: float = 1.0

    def validate(self, num_clients: int | None = None) -> None:
        if not self.gamma > 0:
            raise ConfigError("gamma must be > 0", "gamma")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0,1]", "rho")
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigError("epsilon must lie in (0,1]", "epsilon")
        if not self.zeta > 0:
            raise ConfigError("zeta must be > 0", "zeta")
        if not self.dual_step > 0:
            raise ConfigError("dual_step must be > 0", "dual_step")
        if not self.mixture_step > 0:
            raise ConfigError("mixture_step must be > 0", "mixture_step")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError("beta must lie in (0,1]", "beta")
        if self.select < 1:
            raise ConfigError("select must be >= 1", "select")
        if num_clients is not None and self.select > num_clients:
            raise ConfigError(f"select={self.select} exceeds the client count {num_clients}", "select")
        if self.budget < 0:
            raise ConfigError("budget must be >= 0", "budget")
        if not self.cost_coeff > 0:
            raise ConfigError("cost_coeff must be > 0", "cost_coeff")
        if not 0.0 <= self.initial_reputation <= 1.0:
            raise ConfigError("initial_reputation must lie in [0,1]", "initial_reputation")


@dataclass
class ClientProfile:
    id: int
    reputation: float = 1.0
    selection_count: int = 0
    # shard size, most recent local loss, most recent contribution score
    context: np.ndarray = field(default_factory=lambda: np.zeros(3))
    adversarial: bool = False
    strategy: float = 1.0
    rate_history: deque = field(default_factory=lambda: deque(maxlen=PAYOUT_WINDOW))
    cumulative_payout: float = 0.0


@dataclass
class RoundState:
    t: int
    w_global: ParamVector
    global_delta: np.ndarray
    indicators: np.ndarray
    duals: np.ndarray
    mixture: np.ndarray
    queues: np.ndarray
    budget_remaining: float = 0.0
    pulls: np.ndarray | None = None
    reward_sum: np.ndarray | None = None

    @classmethod
    def initial(cls, w: ParamVector, num_clients: int, num_groups: int) -> "RoundState":
        return cls(
            t=0,
            w_global=w,
            global_delta=np.zeros(len(w)),
            indicators=np.ones(num_clients, dtype=bool),
            duals=np.zeros(num_groups),
            mixture=np.full(num_clients, 1.0 / num_clients),
            queues=np.zeros(num_clients),
            pulls=np.zeros(num_clients, dtype=np.int64),
            reward_sum=np.zeros(num_clients),
        )


@dataclass
class ClientUpdate:
    client_id: int
    w_new: ParamVector
    delta: np.ndarray
    local_loss: float
    # loss of the received global model on the client's shard, overall and per group
    feedback_loss: float = 0.0
    group_losses: dict[int, float] = field(default_factory=dict)
    n_samples: int = 0


@dataclass
class Contribution:
    """Effect of applying one client's update alone to the previous global model."""

    accuracy_gain: float
    loss_gain: float

    @property
    def score(self) -> float:
        return contribution_score(self.accuracy_gain)


# ---------------------------------------------------------------------------
# pure building blocks
# ---------------------------------------------------------------------------


def _stack(weights: Sequence) -> np.ndarray:
    if len(weights) == 0:
        raise AggregationError("nothing to aggregate")
    arrs = [w.values if isinstance(w, ParamVector) else np.asarray(w, dtype=np.float64)
            for w in weights]
    n = arrs[0].shape[0]
    if any(a.ndim != 1 or a.shape[0] != n for a in arrs):
        raise AggregationError("client parameter vectors differ in length")
    return np.stack(arrs)


def aggregate_fedavg(weights: Sequence) -> np.ndarray:
    return _stack(weights).mean(axis=0)


def aggregate_weighted(weights: Sequence, coeffs: np.ndarray) -> np.ndarray:
    W = _stack(weights)
    return np.asarray(coeffs, dtype=np.float64) @ W


def contribution_score(accuracy_gain: float) -> float:
    """1 for a non-negative holdout accuracy change, else linear decay reaching 0 at -0.05."""
    if accuracy_gain >= 0:
        return 1.0
    return min(1.0, max(0.0, 1.0 + accuracy_gain / DEGRADATION_SCALE))


def reputation_update(r_prev: float, contribution: float, epsilon: float) -> float:
    r = (1.0 - epsilon) * r_prev + epsilon * contribution
    return min(1.0, max(0.0, r))


def reputation_coefficients(
    deltas: Sequence, reputations: Sequence[float], gamma: float, rho: float
) -> np.ndarray | None:
    """Normalised weights r_i * gamma / ||delta_i||; None when every client is below ``rho``."""
    r = np.asarray(reputations, dtype=np.float64)
    norms = np.linalg.norm(_stack(deltas), axis=1)
    keep = r >= rho
    if not keep.any():
        return None
    u = np.where(keep, r * gamma / np.maximum(norms, NORM_FLOOR), 0.0)
    total = u.sum()
    if total <= 0:
        return None
    return u / total


def aggregate_reputation(
    weights: Sequence, deltas: Sequence, reputations: Sequence[float], gamma: float, rho: float
) -> np.ndarray:
    if len(weights) != len(deltas) or len(weights) != len(reputations):
        raise AggregationError("weights, deltas and reputations must align")
    coeffs = reputation_coefficients(deltas, reputations, gamma, rho)
    if coeffs is None:
        log.warning("all clients below reputation threshold %.3f; falling back to FedAvg", rho)
        return aggregate_fedavg(weights)
    return aggregate_weighted(weights, coeffs)


def bgl_local_objective(
    w: ParamVector, shard: LabeledDataset, duals: np.ndarray, zeta: float
) -> tuple[float, np.ndarray]:
    """Loss plus sum_g duals[g] * max(0, L_g - zeta), with its (sub)gradient."""
    duals = np.asarray(duals, dtype=np.float64)
    if np.any(duals < 0):
        raise ConfigError("duals must be non-negative")
    return loss_and_grad(w, shard, duals=duals, zeta=zeta)


def bgl_dual_update(
    duals: np.ndarray, group_losses, zeta: float, dual_step: float
) -> np.ndarray:
    """Projected ascent on the client-averaged group losses.

    ``group_losses`` is a (clients x groups) array; NaN marks a group absent
    from a client.  Groups nobody reported keep their dual unchanged.
    """
    if not dual_step > 0:
        raise ConfigError("dual_step must be > 0", "dual_step")
    L = np.atleast_2d(np.asarray(group_losses, dtype=np.float64))
    duals = np.asarray(duals, dtype=np.float64)
    seen = ~np.all(np.isnan(L), axis=0)
    out = duals.copy()
    if seen.any():
        mean = np.nanmean(L[:, seen], axis=0)
        out[seen] = np.maximum(0.0, duals[seen] + dual_step * (mean - zeta))
    return out


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def afl_step(
    weights: Sequence, client_losses, mixture: np.ndarray, mixture_step: float
) -> tuple[np.ndarray, np.ndarray]:
    mixture = np.asarray(mixture, dtype=np.float64)
    w_global = aggregate_weighted(weights, mixture)
    losses = np.asarray(client_losses, dtype=np.float64)
    new_mix = project_simplex(mixture + mixture_step * (losses - losses.mean()))
    return w_global, new_mix


def _capped_shares(budget: float, scores: np.ndarray) -> np.ndarray:
    total = scores.sum()
    if total <= 0 or budget == 0:
        return np.zeros_like(scores)
    pay = budget * (scores / total)
    # rounding may push a sum a few ulps over budget; shave the largest share until the
    # exact, sequential and pairwise (numpy) sums all stay within it
    for _ in range(16):
        excess = max(math.fsum(pay), sum(pay.tolist()), float(np.sum(pay))) - budget
        if excess <= 0:
            break
        i = int(np.argmax(pay))
        pay[i] = max(0.0, pay[i] - max(excess, math.ulp(pay[i])))
    return pay


def incentive_step(
    profiles: Sequence[ClientProfile], contribution_scores, budget: float, cost_coeff: float
) -> tuple[np.ndarray, np.ndarray]:
    """Split ``budget`` in proportion to scores and best-respond every client's effort.

    Each profile records its payout per unit of effort; the next effort is
    the maximiser of ``rate * s - cost_coeff * s**2`` where ``rate`` is the
    trailing mean of that record.  Profiles are updated in place.
    """
    if budget < 0:
        raise ConfigError("budget must be >= 0", "budget")
    if not cost_coeff > 0:
        raise ConfigError("cost_coeff must be > 0", "cost_coeff")
    scores = np.asarray(contribution_scores, dtype=np.float64)
    if np.any(scores < 0):
        raise ConfigError("contribution scores must be >= 0")
    pay = _capped_shares(budget, scores)
    efforts = np.empty(len(profiles))
    for i, p in enumerate(profiles):
        p.rate_history.append(pay[i] / max(p.strategy, EFFORT_FLOOR))
        p.cumulative_payout += pay[i]
        expected_rate = sum(p.rate_history) / len(p.rate_history)
        p.strategy = expected_rate / (2.0 * cost_coeff)
        efforts[i] = p.strategy
    return pay, efforts


def flip_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return (np.asarray(labels) + 1) % num_classes


def make_adversarial_update(
    shard: LabeledDataset, w: ParamVector, cfg: TrainConfig, round: int = 0
) -> tuple[ParamVector, np.ndarray, float]:
    """Label-flipping poisoner: train honestly on labels shifted by one class."""
    C = w.arch.classes
    poisoned = LabeledDataset(
        shard.features, flip_labels(shard.labels, C), C, shard.groups,
        shard.label_names, shard.group_names,
    )
    return local_train(w, poisoned, cfg, round)


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


class Mechanism:
    name = "fedavg"
    label = "AES-FL"
    needs_contributions = False

    def __init__(self, cfg: MechanismConfig | None = None):
        self.cfg = cfg or MechanismConfig()

    def select(self, state: RoundState, profiles: Sequence[ClientProfile]) -> np.ndarray:
        return np.ones(len(profiles), dtype=bool)

    def local_options(self, state: RoundState, profile: ClientProfile) -> dict:
        return {}

    def aggregate(self, state, updates: Sequence[ClientUpdate], profiles) -> np.ndarray:
        return aggregate_fedavg([u.w_new for u in updates])

    def feedback(self, state, updates, profiles, contributions) -> dict:
        return {}


class FedAvg(Mechanism):
    pass


class LongTermFairness(Mechanism):
    """UCB1 bandit selection of ``select`` clients with virtual-queue fairness."""

    name = "ltf"
    label = "LTF Constraint"
    needs_contributions = True

    def scores(self, state: RoundState) -> np.ndarray:
        n = state.pulls
        mean = np.divide(state.reward_sum, n, out=np.zeros(n.shape), where=n > 0)
        bonus = np.full(n.shape, np.inf)
        log_t = math.log(max(state.t, 1))
        seen = n > 0
        bonus[seen] = np.sqrt(2.0 * log_t / n[seen])
        return mean + bonus + state.queues

    def select(self, state, profiles):
        K = len(profiles)
        m = self.cfg.select
        if m > K:
            raise ConfigError(f"cannot select {m} of {K} clients")
        s = self.scores(state)
        order = sorted(range(K), key=lambda k: (-s[k], -state.queues[k], k))
        ind = np.zeros(K, dtype=bool)
        ind[order[:m]] = True
        state.queues = np.maximum(state.queues + self.cfg.beta - ind, 0.0)
        return ind

    def feedback(self, state, updates, profiles, contributions):
        for u in updates:
            k = u.client_id
            state.pulls[k] += 1
            state.reward_sum[k] += contributions[k].score
        return {}


class Reputation(Mechanism):
    name = "reputation"
    label = "Reputation"
    needs_contributions = True

    def aggregate(self, state, updates, profiles):
        return aggregate_reputation(
            [u.w_new for u in updates],
            [u.delta for u in updates],
            [profiles[u.client_id].reputation for u in updates],
            self.cfg.gamma,
            self.cfg.rho,
        )

    def feedback(self, state, updates, profiles, contributions):
        for u in updates:
            p = profiles[u.client_id]
            p.reputation = reputation_update(
                p.reputation, contributions[u.client_id].score, self.cfg.epsilon
            )
        return {}


class BoundedGroupLoss(Mechanism):
    name = "bgl"
    label = "BGL"

    def local_options(self, state, profile):
        return {"duals": state.duals, "zeta": self.cfg.zeta}

    def feedback(self, state, updates, profiles, contributions):
        G = state.duals.shape[0]
        L = np.full((len(updates), G), np.nan)
        for i, u in enumerate(updates):
            for g, v in u.group_losses.items():
                if g < G:
                    L[i, g] = v
        if updates:
            state.duals = bgl_dual_update(state.duals, L, self.cfg.zeta, self.cfg.dual_step)
        return {}


class AgnosticLoss(Mechanism):
    name = "afl"
    label = "AFL"

    def aggregate(self, state, updates, profiles):
        ids = [u.client_id for u in updates]
        lam = state.mixture[ids]
        total = lam.sum()
        lam = lam / total if total > 0 else np.full(len(ids), 1.0 / len(ids))
        return aggregate_weighted([u.w_new for u in updates], lam)

    def feedback(self, state, updates, profiles, contributions):
        if not updates:
            return {}
        ids = np.array([u.client_id for u in updates])
        losses = np.array([u.feedback_loss for u in updates])
        grad = np.zeros_like(state.mixture)
        grad[ids] = losses - losses.mean()
        state.mixture = project_simplex(state.mixture + self.cfg.mixture_step * grad)
        return {}


class IncentiveSharing(Mechanism):
    name = "incentive"
    label = "Incentive"
    needs_contributions = True

    def local_options(self, state, profile):
        return {"fraction": min(1.0, max(0.0, profile.strategy))}

    def feedback(self, state, updates, profiles, contributions):
        scores = np.zeros(len(profiles))
        for u in updates:
            scores[u.client_id] = max(0.0, contributions[u.client_id].loss_gain)
        pay, _ = incentive_step(profiles, scores, self.cfg.budget, self.cfg.cost_coeff)
        state.budget_remaining = self.cfg.budget - math.fsum(pay)
        return {"payouts": pay}


MECHANISMS: dict[str, type[Mechanism]] = {
    cls.name: cls
    for cls in (FedAvg, LongTermFairness, Reputation, BoundedGroupLoss, AgnosticLoss,
                IncentiveSharing)
}


def make_mechanism(name: str, cfg: MechanismConfig | None = None) -> Mechanism:
    try:
        return MECHANISMS[name](cfg)
    except KeyError:
        raise ConfigError(
            f"unknown mechanism {name!r}; choose from {', '.join(MECHANISMS)}"
        ) from None


def select_clients(mechanism: Mechanism, state: RoundState, profiles) -> np.ndarray:
    return mechanism.select(state, profiles)
