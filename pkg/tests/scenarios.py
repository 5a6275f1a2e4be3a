"""Workloads shared by the mechanism tests and the acceptance suite."""

import math

import numpy as np

from fafl.data import LabeledDataset
from fafl.mechanisms import (
    ClientProfile, ClientUpdate, Contribution, LongTermFairness, MechanismConfig, RoundState,
    afl_step, DEGRADATION_SCALE,
)
from fafl.model import Arch, ParamVector


def contribution_with_score(r):
    """A Contribution whose score equals ``r`` (r in [0,1])."""
    return Contribution(DEGRADATION_SCALE * (r - 1.0), 0.0)


def run_ltf(reward, K, m, beta, T):
    """Drive the LTF scheduler alone; ``reward(t, k)`` feeds back a score in [0,1].

    Returns (selection matrix T x K, rewards collected by the selected clients).
    """
    mech = LongTermFairness(MechanismConfig(select=m, beta=beta))
    arch = Arch.linear(1, 2)
    w = ParamVector(np.zeros(arch.size), arch)
    state = RoundState.initial(w, K, 1)
    profiles = [ClientProfile(k) for k in range(K)]
    picks = np.zeros((T, K), dtype=bool)
    got = []
    for t in range(T):
        state.t = t
        ind = mech.select(state, profiles)
        picks[t] = ind
        chosen = np.flatnonzero(ind)
        updates = [ClientUpdate(int(k), w, np.zeros(arch.size), 0.0) for k in chosen]
        rs = {int(k): reward(t, int(k)) for k in chosen}
        got.extend(rs.values())
        mech.feedback(state, updates, profiles, {k: contribution_with_score(r) for k, r in rs.items()})
    return picks, np.array(got)


def ucb_replay(reward, K, m, beta, T):
    """Independent step-by-step UCB1 + virtual-queue scheduler used as an oracle."""
    pulls = [0] * K
    total = [0.0] * K
    queue = [0.0] * K
    picks = np.zeros((T, K), dtype=bool)
    for t in range(T):
        def score(k):
            if pulls[k] == 0:
                return math.inf
            return total[k] / pulls[k] + math.sqrt(2 * math.log(max(t, 1)) / pulls[k]) + queue[k]
        s = [score(k) for k in range(K)]
        order = sorted(range(K), key=lambda k: (-s[k], -queue[k], k))[:m]
        for k in range(K):
            queue[k] = max(queue[k] + beta - (1.0 if k in order else 0.0), 0.0)
        for k in order:
            picks[t, k] = True
            pulls[k] += 1
            total[k] += reward(t, k)
    return picks


def reward_table(K, T, seed=0):
    """Fixed noisy reward instance: client k has mean 0.1 + 0.8 k/(K-1)."""
    rng = np.random.default_rng(seed)
    mu = np.linspace(0.1, 0.9, K)
    table = np.clip(mu + rng.normal(0, 0.1, (T, K)), 0.0, 1.0)
    return mu, table


def bgl_instance(n=4000, minority=0.1, shift=2.0, seed=0):
    """Two groups sharing a 2-D feature space; the minority's boundary sits at x0 = shift."""
    rng = np.random.default_rng(seed)
    g = (rng.random(n) < minority).astype(int)
    X = rng.standard_normal((n, 2))
    y = np.where(g == 0, X[:, 0] > 0, X[:, 0] > shift).astype(int)
    return LabeledDataset(X, y, 2, g)


def grid_minmax_group_loss(data, slopes=np.linspace(0, 6, 61), offsets=np.linspace(-4, 1, 51)):
    """Smallest worst-group logistic loss over models with logit margin a*x0 + c."""
    x0 = data.features[:, 0]
    sign = np.where(data.labels == 1, 1.0, -1.0)
    best = math.inf
    for a in slopes:
        for c in offsets:
            loss = np.logaddexp(0.0, -sign * (a * x0 + c))
            worst = max(loss[data.groups == k].mean() for k in (0, 1))
            best = min(best, worst)
    return best


AFL_CURVATURE = np.array([1.0, 4.0])
AFL_TARGET = np.array([0.0, 1.0])
# min_w max_lambda sum_i lambda_i * c_i/2 * (w - a_i)^2: the two losses cross at w = 2/3
AFL_SADDLE_W = 2.0 / 3.0
AFL_SADDLE_MIX = np.array([2.0 / 3.0, 1.0 / 3.0])


def afl_quadratic(steps=5000, lr=0.1, mixture_step=0.5, tol=1e-3):
    """Iterate afl_step on the two-client quadratic toy.

    Returns (first step at which both w and the mixture are within ``tol`` of
    the saddle, or None; final w; final mixture).
    """
    c, a = AFL_CURVATURE, AFL_TARGET
    w = 0.0
    mix = np.array([0.5, 0.5])
    hit = None
    for step in range(1, steps + 1):
        losses = 0.5 * c * (w - a) ** 2
        clients = [np.array([w - lr * c[i] * (w - a[i])]) for i in range(2)]
        w_vec, mix = afl_step(clients, losses, mix, mixture_step)
        w = float(w_vec[0])
        if hit is None and abs(w - AFL_SADDLE_W) <= tol and np.max(np.abs(mix - AFL_SADDLE_MIX)) <= tol:
            hit = step
    return hit, w, mix
