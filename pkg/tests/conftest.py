import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, n, cond=None):
    """Random symmetric positive definite matrix, optionally with set
    condition number."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    if cond is None:
        w = rng.uniform(0.5, 3.0, size=n)
    else:
        w = np.logspace(0.0, np.log10(cond), n)
    return (q * w) @ q.T


def random_psd(rng, n, rank):
    g = rng.standard_normal((n, rank))
    return g @ g.T
