import numpy as np
import pytest


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def central_diff(f, arr, step=1e-5):
    """Central differences of the scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    flat, gf = arr.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        old = flat[j]
        flat[j] = old + step
        up = f()
        flat[j] = old - step
        down = f()
        flat[j] = old
        gf[j] = (up - down) / (2 * step)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
