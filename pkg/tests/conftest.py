import numpy as np
import pytest

from fafl.data import LabeledDataset


def fd_gradient(f, x, h=1e-6):
    """Central finite differences of a scalar function."""
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def random_dataset(rng, n, d, c, groups=None):
    X = rng.standard_normal((n, d))
    y = rng.integers(0, c, n)
    g = None if groups is None else rng.integers(0, groups, n)
    return LabeledDataset(X, y, c, g)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
