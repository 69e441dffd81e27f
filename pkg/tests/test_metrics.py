import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srmra.metrics import noise_regime, shift_aligned_error, snr
from srmra.model import DimensionError, circular_shift


def brute_error(x_hat, x):
    L = x.shape[0]
    best = min(
        (np.linalg.norm(circular_shift(x_hat, (a, b)) - x), (a, b))
        for a in range(L) for b in range(L)
    )
    return best[0] / np.linalg.norm(x), best[1]


def test_identity(rng):
    x = rng.random((8, 8))
    r = shift_aligned_error(x, x)
    assert r.error == 0.0 and r.best_shift == (0, 0)


def test_shifted_copy(rng):
    x = rng.random((8, 8))
    for s in [(1, 0), (3, 7), (5, 5)]:
        r = shift_aligned_error(circular_shift(x, s), x)
        assert r.error < 1e-15
        assert r.best_shift == s


def test_brute_force(rng):
    for _ in range(10):
        x = rng.random((8, 8))
        x_hat = rng.random((8, 8))
        err, s = brute_error(x_hat, x)
        r = shift_aligned_error(x_hat, x)
        assert abs(r.error - err) <= 1e-12
        # brute force shifts x_hat onto x; best_shift is x_hat's offset relative to x
        assert r.best_shift == ((-s[0]) % 8, (-s[1]) % 8)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 2**32 - 1))
def test_shift_invariance_of_minimum(s1, s2, seed):
    r = np.random.default_rng(seed)
    x, x_hat = r.random((8, 8)), r.random((8, 8))
    a = shift_aligned_error(x_hat, x).error
    b = shift_aligned_error(circular_shift(x_hat, (s1, s2)), x).error
    assert abs(a - b) <= 1e-12


def test_scale_sensitivity(rng):
    x = rng.random((8, 8))
    assert shift_aligned_error(2 * x, x).error == 1.0


def test_errors(rng):
    with pytest.raises(ValueError):
        shift_aligned_error(rng.random((4, 4)), np.zeros((4, 4)))
    with pytest.raises(DimensionError):
        shift_aligned_error(rng.random((4, 4)), rng.random((8, 8)))


def test_snr():
    x = np.full((8, 8), 0.25)
    assert snr(x, 0.25) == 1.0
    assert snr(np.ones((16, 16)), 1 / 8) == 64.0
    with pytest.raises(ValueError):
        snr(x, 0.0)
    r = shift_aligned_error(x, x, sigma=0.25)
    assert r.snr == 1.0


def test_noise_regime_labels():
    assert noise_regime(1 / 8) == "low"
    assert noise_regime(1 / 2) == "medium"
    assert noise_regime(1.0) == "high"
