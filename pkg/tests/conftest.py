import numpy as np
import pytest

from srmra.model import ShiftDistribution, circular_shift, downsample


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def brute_residuals(frames, x, K):
    """``r[i, s1, s2] = ||y_i - P R_s x||^2`` by explicit loops over shifts."""
    L = x.shape[0]
    r = np.empty((len(frames), L, L))
    for s1 in range(L):
        for s2 in range(L):
            v = downsample(circular_shift(x, (s1, s2)), K)
            r[:, s1, s2] = ((frames - v[None]) ** 2).sum(axis=(1, 2))
    return r


def brute_loglik(frames, x, rho_joint, sigma, K):
    r = brute_residuals(frames, x, K)
    total = 0.0
    for i in range(len(frames)):
        a = np.log(rho_joint) - r[i] / (2 * sigma**2)
        m = a.max()
        total += m + np.log(np.exp(a - m).sum())
    return total


def random_rho(L, rng):
    return ShiftDistribution.random(L, rng)
