"""Hot numeric kernels for the softmax-linear / tanh-MLP classifiers.

Every kernel exists twice: a numba ``@njit`` version built from explicit loops
and a vectorised pure-numpy version.  The active backend is chosen once at
import time; set ``FAFL_DISABLE_NUMBA=1`` to force the numpy path (or when numba
is not installed).  Both backends expose the same signatures, so callers only
ever go through :data:`ACTIVE`.

Parameter layout (flat float64 vector)::

    linear (H == 0):  W[D, C] row-major, b[C]
    mlp    (H  > 0):  W1[D, H], b1[H], W2[H, C], b2[C]

The loss is mean cross-entropy plus an optional bounded-group-loss penalty
``sum_g lam[g] * max(0, L_g - zeta)`` where ``L_g`` is the mean cross-entropy of
the samples whose group id is ``g``.  Passing an empty ``lam`` disables it.
"""

from __future__ import annotations

import os
from typing import Callable, NamedTuple

import numpy as np

try:  # pragma: no cover - exercised implicitly by whichever path is installed
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False

DISABLE_ENV = "FAFL_DISABLE_NUMBA"


class Backend(NamedTuple):
    name: str
    forward: Callable
    per_sample_loss: Callable
    loss_grad: Callable
    sgd_epoch: Callable


def param_count(D: int, H: int, C: int) -> int:
    if H == 0:
        return D * C + C
    return D * H + H + H * C + C


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def _np_unpack(params, D, H, C):
    if H == 0:
        W = params[: D * C].reshape(D, C)
        b = params[D * C : D * C + C]
        return W, b, None, None
    o = 0
    W1 = params[o : o + D * H].reshape(D, H)
    o += D * H
    b1 = params[o : o + H]
    o += H
    W2 = params[o : o + H * C].reshape(H, C)
    o += H * C
    b2 = params[o : o + C]
    return W1, b1, W2, b2


def _np_forward_full(params, X, D, H, C):
    if H == 0:
        W, b, _, _ = _np_unpack(params, D, H, C)
        return X @ W + b, None
    W1, b1, W2, b2 = _np_unpack(params, D, H, C)
    A = np.tanh(X @ W1 + b1)
    return A @ W2 + b2, A


def _np_forward(params, X, D, H, C):
    return _np_forward_full(params, X, D, H, C)[0]


def _np_log_softmax(logits):
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def _np_per_sample_loss(params, X, y, D, H, C):
    logp = _np_log_softmax(_np_forward(params, X, D, H, C))
    return -logp[np.arange(X.shape[0]), y]


def _np_loss_grad(params, X, y, groups, lam, zeta, D, H, C):
    n = X.shape[0]
    logits, A = _np_forward_full(params, X, D, H, C)
    logp = _np_log_softmax(logits)
    rows = np.arange(n)
    ce = -logp[rows, y]
    weights = np.full(n, 1.0 / n)
    loss = ce.sum() / n
    for g in range(lam.shape[0]):
        if lam[g] <= 0.0:
            continue
        mask = groups == g
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        lg = ce[mask].sum() / cnt
        if lg > zeta:
            loss += lam[g] * (lg - zeta)
            weights[mask] += lam[g] / cnt
    dlog = np.exp(logp)
    dlog[rows, y] -= 1.0
    dlog *= weights[:, None]
    grad = np.empty_like(params)
    if H == 0:
        grad[: D * C] = (X.T @ dlog).ravel()
        grad[D * C :] = dlog.sum(axis=0)
        return loss, grad
    _, _, W2, _ = _np_unpack(params, D, H, C)
    dz = (dlog @ W2.T) * (1.0 - A * A)
    o = 0
    grad[o : o + D * H] = (X.T @ dz).ravel()
    o += D * H
    grad[o : o + H] = dz.sum(axis=0)
    o += H
    grad[o : o + H * C] = (A.T @ dlog).ravel()
    o += H * C
    grad[o : o + C] = dlog.sum(axis=0)
    return loss, grad


def _np_sgd_epoch(params, X, y, groups, lam, zeta, order, batch_size, lr, D, H, C):
    n = order.shape[0]
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        loss, grad = _np_loss_grad(params, X[idx], y[idx], groups[idx], lam, zeta, D, H, C)
        params -= lr * grad
        total += loss * idx.shape[0]
    return total / n


NUMPY = Backend("numpy", _np_forward, _np_per_sample_loss, _np_loss_grad, _np_sgd_epoch)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, nogil=True)
    def _nb_forward_full(params, X, D, H, C):
        n = X.shape[0]
        logits = np.empty((n, C))
        if H == 0:
            for i in range(n):
                for c in range(C):
                    acc = params[D * C + c]
                    for d in range(D):
                        acc += X[i, d] * params[d * C + c]
                    logits[i, c] = acc
            return logits, np.empty((0, 0))
        A = np.empty((n, H))
        ob1 = D * H
        ow2 = ob1 + H
        ob2 = ow2 + H * C
        for i in range(n):
            for h in range(H):
                acc = params[ob1 + h]
                for d in range(D):
                    acc += X[i, d] * params[d * H + h]
                A[i, h] = np.tanh(acc)
            for c in range(C):
                acc = params[ob2 + c]
                for h in range(H):
                    acc += A[i, h] * params[ow2 + h * C + c]
                logits[i, c] = acc
        return logits, A

    @njit(cache=True, nogil=True)
    def _nb_forward(params, X, D, H, C):
        return _nb_forward_full(params, X, D, H, C)[0]

    @njit(cache=True, nogil=True)
    def _nb_log_softmax_rows(logits):
        n, C = logits.shape
        out = np.empty((n, C))
        for i in range(n):
            m = logits[i, 0]
            for c in range(1, C):
                if logits[i, c] > m:
                    m = logits[i, c]
            s = 0.0
            for c in range(C):
                s += np.exp(logits[i, c] - m)
            lse = np.log(s)
            for c in range(C):
                out[i, c] = logits[i, c] - m - lse
        return out

    @njit(cache=True, nogil=True)
    def _nb_per_sample_loss(params, X, y, D, H, C):
        logp = _nb_log_softmax_rows(_nb_forward(params, X, D, H, C))
        n = X.shape[0]
        ce = np.empty(n)
        for i in range(n):
            ce[i] = -logp[i, y[i]]
        return ce

    @njit(cache=True, nogil=True)
    def _nb_loss_grad(params, X, y, groups, lam, zeta, D, H, C):
        n = X.shape[0]
        logits, A = _nb_forward_full(params, X, D, H, C)
        logp = _nb_log_softmax_rows(logits)
        ce = np.empty(n)
        total = 0.0
        for i in range(n):
            ce[i] = -logp[i, y[i]]
            total += ce[i]
        loss = total / n
        weights = np.full(n, 1.0 / n)
        for g in range(lam.shape[0]):
            if lam[g] <= 0.0:
                continue
            cnt = 0
            s = 0.0
            for i in range(n):
                if groups[i] == g:
                    cnt += 1
                    s += ce[i]
            if cnt == 0:
                continue
            lg = s / cnt
            if lg > zeta:
                loss += lam[g] * (lg - zeta)
                for i in range(n):
                    if groups[i] == g:
                        weights[i] += lam[g] / cnt
        dlog = np.empty((n, C))
        for i in range(n):
            for c in range(C):
                dlog[i, c] = np.exp(logp[i, c])
            dlog[i, y[i]] -= 1.0
            for c in range(C):
                dlog[i, c] *= weights[i]
        grad = np.zeros(params.shape[0])
        if H == 0:
            for i in range(n):
                for c in range(C):
                    g_ic = dlog[i, c]
                    for d in range(D):
                        grad[d * C + c] += X[i, d] * g_ic
                    grad[D * C + c] += g_ic
            return loss, grad
        ob1 = D * H
        ow2 = ob1 + H
        ob2 = ow2 + H * C
        dz = np.empty(H)
        for i in range(n):
            for c in range(C):
                grad[ob2 + c] += dlog[i, c]
            for h in range(H):
                acc = 0.0
                for c in range(C):
                    grad[ow2 + h * C + c] += A[i, h] * dlog[i, c]
                    acc += dlog[i, c] * params[ow2 + h * C + c]
                dz[h] = acc * (1.0 - A[i, h] * A[i, h])
            for h in range(H):
                grad[ob1 + h] += dz[h]
                for d in range(D):
                    grad[d * H + h] += X[i, d] * dz[h]
        return loss, grad

    @njit(cache=True, nogil=True)
    def _nb_sgd_epoch(params, X, y, groups, lam, zeta, order, batch_size, lr, D, H, C):
        n = order.shape[0]
        total = 0.0
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            idx = order[start:stop]
            loss, grad = _nb_loss_grad(params, X[idx], y[idx], groups[idx], lam, zeta, D, H, C)
            for j in range(params.shape[0]):
                params[j] -= lr * grad[j]
            total += loss * (stop - start)
        return total / n

    NUMBA: Backend | None = Backend(
        "numba", _nb_forward, _nb_per_sample_loss, _nb_loss_grad, _nb_sgd_epoch
    )
else:  # pragma: no cover
    NUMBA = None


def _select() -> Backend:
    if NUMBA is None or os.environ.get(DISABLE_ENV, "") not in ("", "0"):
        return NUMPY
    return NUMBA


ACTIVE: Backend = _select()
