import numpy as np
import pytest

from bflsim.fl_core import Dataset


def finite_diff(f, x, h=1e-6):
    """Central differences of a scalar function."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset(rng):
    X = rng.standard_normal((10, 3))
    y = rng.integers(0, 3, 10)
    return Dataset(X, y, 3)
