"""Time one local SGD epoch and a full-batch loss/gradient on both kernel backends.

    python3 benchmarks/bench_kernels.py [--samples 2700] [--hidden 0] [--repeats 20]
"""

import argparse
import time

import numpy as np

from fafl import kernels


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--samples", type=int, default=2700)
    ap.add_argument("--features", type=int, default=8)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--hidden", type=int, default=0)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    N, D, H, C = args.samples, args.features, args.hidden, args.classes
    X = rng.standard_normal((N, D))
    y = rng.integers(0, C, N).astype(np.int64)
    groups = np.zeros(N, dtype=np.int64)
    lam = np.zeros(0)
    w0 = rng.uniform(-0.1, 0.1, kernels.param_count(D, H, C))
    order = rng.permutation(N).astype(np.int64)

    backends = [kernels.NUMPY]
    if kernels.NUMBA is not None:
        backends.append(kernels.NUMBA)
    else:
        print("numba unavailable: timing the numpy backend only")

    results = {}
    for be in backends:
        # first call triggers compilation (or cache load) for numba
        be.sgd_epoch(w0.copy(), X, y, groups, lam, 0.0, order, args.batch, 0.01, D, H, C)
        epoch = best_of(
            lambda: be.sgd_epoch(w0.copy(), X, y, groups, lam, 0.0, order, args.batch, 0.01,
                                 D, H, C),
            args.repeats,
        )
        grad = best_of(lambda: be.loss_grad(w0, X, y, groups, lam, 0.0, D, H, C), args.repeats)
        results[be.name] = (epoch, grad)
        print(f"{be.name:>6}: sgd epoch {epoch * 1e3:8.3f} ms   full loss+grad {grad * 1e3:8.3f} ms")

    if len(results) == 2:
        (e_np, g_np), (e_nb, g_nb) = results["numpy"], results["numba"]
        print(f"speedup: epoch x{e_np / e_nb:.1f}, loss+grad x{g_np / g_nb:.1f}")
        a = w0.copy()
        b = w0.copy()
        kernels.NUMPY.sgd_epoch(a, X, y, groups, lam, 0.0, order, args.batch, 0.01, D, H, C)
        kernels.NUMBA.sgd_epoch(b, X, y, groups, lam, 0.0, order, args.batch, 0.01, D, H, C)
        print(f"max |numpy - numba| after one epoch: {np.max(np.abs(a - b)):.3e}")


if __name__ == "__main__":
    main()
