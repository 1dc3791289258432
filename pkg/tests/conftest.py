import numpy as np
import pytest

from distimp.data import TrialDataset
from distimp.simulation import preset, simulate_trial


def random_monotone(rng, n_per_group=40, T=4, p=2, drop=0.2):
    """Random monotone dataset with Gaussian outcomes; both arms present."""
    n = 2 * n_per_group
    x = rng.standard_normal((n, p))
    g = np.repeat([1, 2], n_per_group)
    y = rng.standard_normal((n, T)).cumsum(axis=1) + x.sum(axis=1, keepdims=True)
    r = np.ones((n, T), dtype=bool)
    for k in range(1, T):
        r[:, k] = r[:, k - 1] & (rng.random(n) > drop)
    return TrialDataset(x, g, y, r)


@pytest.fixture
def small_trial():
    return simulate_trial(preset("j2r-ate"), 11, N=150)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
