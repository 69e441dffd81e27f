import numpy as np
import pytest

from conftest import random_rho
from srmra.model import (ModelParams, ShiftDistribution, circular_shift, downsample,
                         sample_observations, shift_of)
from srmra.moments import (MemoryGuardError, MomentPair, ObjectiveWeights, analytic_m1, analytic_m2,
                           analytic_moments, bccb_matrix, circular_convolution, decimation_matrix,
                           empirical_moments, ls_gradient, ls_objective, ls_value_and_grad)


def dense_moments(x, rho, sigma, K):
    L = x.shape[0]
    C = bccb_matrix(x)
    P = decimation_matrix(L, K)
    w = rho.joint.ravel()
    m1 = P @ C @ w
    m2 = P @ C @ np.diag(w) @ C.T @ P.T + sigma**2 * (P @ P.T)
    return m1, m2


def test_bccb_columns(rng):
    x = rng.random((4, 4))
    C = bccb_matrix(x)
    np.testing.assert_array_equal(C[:, 1 * 4 + 3], circular_shift(x, (1, 3)).ravel())
    with pytest.raises(MemoryGuardError):
        bccb_matrix(np.zeros((32, 32)))


def test_dense_oracle(rng):
    for L, K in [(4, 1), (4, 2), (8, 2), (8, 1)]:
        x = rng.random((L, L))
        rho = random_rho(L, rng)
        m1, m2 = dense_moments(x, rho, 0.3, K)
        np.testing.assert_allclose(analytic_m1(x, rho, K), m1, atol=1e-10)
        np.testing.assert_allclose(analytic_m2(x, rho, 0.3, K), m2, atol=1e-10)


def test_m1_examples(rng):
    x = rng.random((8, 8))
    np.testing.assert_allclose(analytic_m1(x, ShiftDistribution.point_mass(8, (0, 0)), 2),
                               downsample(x, 2).ravel(), atol=1e-14)
    np.testing.assert_allclose(analytic_m1(x, ShiftDistribution.uniform(8), 2), x.mean(), atol=1e-14)


def test_m2_examples(rng):
    x = rng.random((8, 8))
    v = downsample(circular_shift(x, (2, 5)), 2).ravel()
    m2 = analytic_m2(x, ShiftDistribution.point_mass(8, (2, 5)), 0.0, 2)
    np.testing.assert_allclose(m2, np.outer(v, v), atol=1e-14)
    c = np.full((8, 8), 0.4)
    np.testing.assert_allclose(analytic_m2(c, random_rho(8, rng), 0.5, 2),
                               0.16 + 0.25 * np.eye(16), atol=1e-13)
    m2 = analytic_m2(x, random_rho(8, rng), 0.2, 2)
    np.testing.assert_allclose(m2, m2.T, atol=1e-12)
    assert np.linalg.eigvalsh(m2).min() >= 0.04 - 1e-12


def test_convolution_matches_shift_sum(rng):
    x = rng.random((6, 6))
    k = rng.random((6, 6))
    ref = sum(k[a, b] * circular_shift(x, (a, b)) for a in range(6) for b in range(6))
    np.testing.assert_allclose(circular_convolution(x, k), ref, atol=1e-12)


def test_memory_guard():
    with pytest.raises(MemoryGuardError):
        analytic_m2(np.zeros((200, 200)), ShiftDistribution.uniform(200), 0.1, 2)


def test_empirical_examples(rng):
    y = rng.random((1, 4, 4))
    m = empirical_moments(y)
    np.testing.assert_allclose(m.m1, y[0].ravel())
    np.testing.assert_allclose(m.m2, np.outer(y[0].ravel(), y[0].ravel()))
    z = empirical_moments(np.zeros((5, 4, 4)))
    assert not z.m1.any() and not z.m2.any()
    with pytest.raises(ValueError):
        empirical_moments(np.zeros((0, 4, 4)))


def test_empirical_noiseless_point_mass(rng):
    x = rng.random((8, 8))
    rho = ShiftDistribution.point_mass(8, (3, 1))
    obs = sample_observations(x, rho, ModelParams(8, 2, 0.0, 100), 0)
    m = empirical_moments(obs)
    # "exactly" up to FFT round-off in the analytic path
    np.testing.assert_allclose(m.m1, analytic_m1(x, rho, 2), rtol=0, atol=1e-14)


def test_empirical_chunking_and_streaming(rng):
    frames = rng.random((37, 4, 4))
    a = empirical_moments(frames, chunk_size=5)
    b = empirical_moments(iter(list(frames)), chunk_size=5)
    np.testing.assert_array_equal(a.m1, b.m1)
    np.testing.assert_array_equal(a.m2, b.m2)
    ref = frames.reshape(37, -1)
    np.testing.assert_allclose(a.m2, ref.T @ ref / 37, atol=1e-14)
    np.testing.assert_allclose(a.m2, a.m2.T, atol=1e-12)


def test_law_of_large_numbers(rng):
    x = rng.random((8, 8))
    rho = random_rho(8, rng)
    target = analytic_moments(x, rho, 0.25, 2)
    errs = []
    for N in (1000, 16000):
        m = empirical_moments(sample_observations(x, rho, ModelParams(8, 2, 0.25, N), 2))
        errs.append(np.abs(m.m2 - target.m2).max())
    assert errs[1] < errs[0]
    assert errs[1] < 0.02


def test_objective_dense_oracle_and_zero_at_truth(rng):
    for L, K in [(4, 2), (8, 2), (4, 1)]:
        x = rng.random((L, L))
        rho = random_rho(L, rng)
        target = analytic_moments(x, rho, 0.1, K)
        assert ls_objective(x, rho, target, 0.1) < 1e-24
        x2 = rng.random((L, L))
        rho2 = random_rho(L, rng)
        m1, m2 = dense_moments(x2, rho2, 0.1, K)
        lam = ObjectiveWeights.default(L, 0.1).lam
        ref = np.sum((m2 - target.m2) ** 2) + lam * np.sum((m1 - target.m1) ** 2)
        assert abs(ls_objective(x2, rho2, target, 0.1) - ref) <= 1e-10 * max(1, ref)


def test_default_lambda():
    assert ObjectiveWeights.default(32, 0.5).lam == pytest.approx(1 / (1024 * 1.25))
    with pytest.raises(ValueError):
        ObjectiveWeights(0.0)


def test_objective_rejects_mismatched_target(rng):
    target = analytic_moments(rng.random((8, 8)), random_rho(8, rng), 0.1, 2)
    with pytest.raises(ValueError):
        ls_objective(rng.random((6, 6)), random_rho(6, rng), target, 0.1)


def _fd_check(rng, n_coords=50):
    L, K = 8, 2
    x = rng.random((L, L))
    rho = random_rho(L, rng)
    target = analytic_moments(rng.random((L, L)), random_rho(L, rng), 0.25, K)
    gx, g1, g2 = ls_gradient(x, rho, target, 0.25)

    def f(z):
        return ls_value_and_grad(z[:64].reshape(8, 8), _Raw(z[64:72], z[72:]), target, 0.25)[0]

    z0 = np.concatenate([x.ravel(), rho.rho1, rho.rho2])
    g = np.concatenate([gx.ravel(), g1, g2])
    worst = 0.0
    for i in rng.choice(z0.size, n_coords, replace=False):
        h = 1e-5
        e = np.zeros_like(z0)
        e[i] = h
        fd = (f(z0 + e) - f(z0 - e)) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8))
    return worst


class _Raw:
    def __init__(self, r1, r2):
        self.rho1, self.rho2 = r1, r2


def test_gradient_finite_differences(rng):
    assert _fd_check(rng) <= 1e-5


def test_moment_pair_io(tmp_path, rng):
    m = analytic_moments(rng.random((8, 8)), random_rho(8, rng), 0.2, 2)
    m.save(tmp_path / "m")
    back = MomentPair.load(tmp_path / "m")
    np.testing.assert_array_equal(back.m1, m.m1)
    np.testing.assert_array_equal(back.m2, m.m2)
    assert back.sigma_used == 0.2


def test_bccb_examples(rng):
    np.testing.assert_array_equal(bccb_matrix([[0.7]]), [[0.7]])
    x = rng.random((4, 4))
    C = bccb_matrix(x)
    for col in C.T:
        np.testing.assert_array_equal(np.sort(col), np.sort(x.ravel()))
    delta = np.zeros((4, 4))
    delta[2, 1] = 1.0
    np.testing.assert_array_equal(C @ delta.ravel(), circular_shift(x, (2, 1)).ravel())


def test_lambda_default_value():
    assert ObjectiveWeights.default(128, 0.0).lam == 1 / 16384


def test_gradient_vanishes_at_exact_fit(rng):
    x = rng.random((8, 8))
    rho = random_rho(8, rng)
    target = analytic_moments(x, rho, 0.2, 2)
    gx, g1, g2 = ls_gradient(x, rho, target, 0.2)
    assert np.sqrt(np.sum(gx**2) + np.sum(g1**2) + np.sum(g2**2)) <= 1e-8


def test_m1_term_rho_gradient_symmetry(rng):
    x = np.full((8, 8), 0.3)
    rho = ShiftDistribution.uniform(8)
    target = analytic_moments(rng.random((8, 8)), random_rho(8, rng), 0.2, 2)
    _, a1, a2 = ls_gradient(x, rho, target, 0.2, ObjectiveWeights(1.0))
    _, b1, b2 = ls_gradient(x, rho, target, 0.2, ObjectiveWeights(2.0))
    # the m1 term alone; constant along the simplex, hence zero on its tangent space
    for g in (b1 - a1, b2 - a2):
        np.testing.assert_allclose(g - g.mean(), 0.0, atol=1e-14)


def test_objective_shift_equivariance(rng):
    x = rng.random((8, 8))
    rho = random_rho(8, rng)
    target = analytic_moments(rng.random((8, 8)), random_rho(8, rng), 0.2, 2)
    base = ls_objective(x, rho, target, 0.2)
    for s in [(1, 0), (5, 3)]:
        assert abs(ls_objective(circular_shift(x, s), shift_of(rho, s), target, 0.2) - base) <= 1e-10


def test_lln_m1_monotone_in_N(rng):
    x = rng.random((8, 8))
    rho = random_rho(8, rng)
    ref = analytic_m1(x, rho, 2)
    errs = []
    for N in (100, 1000, 10000):
        m = empirical_moments(sample_observations(x, rho, ModelParams(8, 2, 0.25, N), 4))
        errs.append(np.linalg.norm(m.m1 - ref))
    assert errs[0] > errs[1] > errs[2]


def test_lln_absolute_noiseless(rng):
    x = rng.random((8, 8))
    rho = random_rho(8, rng)
    m = empirical_moments(sample_observations(x, rho, ModelParams(8, 2, 0.0, 100_000), 6))
    ref = analytic_m1(x, rho, 2)
    assert np.linalg.norm(m.m1 - ref) / np.linalg.norm(ref) <= 0.02


def test_pure_noise_second_moment():
    sigma, N = 0.5, 100_000
    obs = sample_observations(np.zeros((8, 8)), ShiftDistribution.uniform(8),
                              ModelParams(8, 2, sigma, N), 8)
    m2 = empirical_moments(obs).m2
    off = m2 - np.diag(np.diag(m2))
    assert np.abs(off).max() <= 5 * sigma**2 / np.sqrt(N)
    np.testing.assert_allclose(np.diag(m2), sigma**2, rtol=0.02)
