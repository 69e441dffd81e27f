"""Projected expectation-maximization.

For an observation ``y`` the residual to every noiseless frame is obtained at
once from the expansion::

    ||y - P R_s x||^2 = ||y||^2 - 2 <P^T y, R_s x> + <P^T 1, R_s x^2>

where both correlation maps run through the FFT. The M-step reads the
inverse of ``P`` in the normal equations as the adjoint ``P^T``, which
makes the system matrix diagonal, so the image update is a per-pixel ratio.
The shift distribution is kept as a full joint over ``(s1, s2)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .denoise import DenoiserError, DenoiserHandle, DenoiseSchedule, schedule_next
from .estimate import Estimate, random_initialization
from .metrics import shift_aligned_error
from .moments import shift_index_table
from .model import ObservationSet, ShiftDistribution, upsample_adjoint, validate_image

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 1024


@dataclass(frozen=True)
class EmSolverConfig:
    F: int = 5
    max_outer: int = 100
    diag_floor: float = 1e-10
    seed: int = 0
    stop_tol: float = 1e-9
    chunk_size: int = DEFAULT_CHUNK
    rho_mix: float = 0.1

    def __post_init__(self):
        if self.F < 1 or self.max_outer < 1 or self.chunk_size < 1:
            raise ValueError("F, max_outer and chunk_size must be >= 1")
        if self.diag_floor <= 0 or self.stop_tol <= 0:
            raise ValueError("diag_floor and stop_tol must be positive")
        if not 0 <= self.rho_mix < 1:
            raise ValueError("rho_mix must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EmSolverConfig":
        return cls(**d)


@dataclass
class Responsibilities:
    """``log_w[i, s1, s2]``, normalized over shifts for every observation.

    ``log_norm[i]`` is ``log sum_s rho[s] exp(-||y_i - P R_s x||^2 / (2 sigma^2))``,
    so ``log_norm.sum()`` is the log-likelihood up to the usual constant.
    """

    log_w: np.ndarray
    log_norm: np.ndarray

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_w)

    @property
    def loglik(self) -> float:
        return float(self.log_norm.sum())


def _joint(rho) -> np.ndarray:
    return rho.joint if isinstance(rho, ShiftDistribution) else np.asarray(rho, dtype=np.float64)


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _upsampled_spectra(frames: np.ndarray, K: int) -> np.ndarray:
    c, Ll, _ = frames.shape
    U = np.zeros((c, Ll * K, Ll * K))
    U[:, ::K, ::K] = frames
    return np.fft.rfft2(U)


class _ResidualMaps:
    """Per-image pieces of the residual expansion, shared across chunks."""

    def __init__(self, x: np.ndarray, K: int):
        L = x.shape[0]
        self.L, self.K = L, K
        self.x_flat = x.ravel()
        self.x_hat_conj = np.conj(np.fft.rfft2(x))
        mask_hat = np.fft.rfft2(upsample_adjoint(np.ones((L // K, L // K)), K))
        # energy[s] = ||P R_s x||^2
        self.energy = np.fft.irfft2(mask_hat * np.conj(np.fft.rfft2(x * x)), s=(L, L))

    def residuals(self, frames: np.ndarray) -> np.ndarray:
        cross = np.fft.irfft2(_upsampled_spectra(frames, self.K) * self.x_hat_conj,
                              s=(self.L, self.L))
        norms = np.einsum("ijk,ijk->i", frames, frames)
        r = norms[:, None, None] - 2.0 * cross + self.energy[None]
        r = np.maximum(r, 0.0)
        # the expansion cancels badly at the best fit, which dominates the weights;
        # recompute that entry directly
        flat = r.reshape(len(frames), -1)
        best = np.argmin(flat, axis=1)
        fit = self.x_flat[shift_index_table(self.L, self.K)[best]]
        flat[np.arange(len(frames)), best] = np.sum((frames.reshape(len(frames), -1) - fit) ** 2, axis=1)
        return r


def residual_maps(obs: ObservationSet, x) -> np.ndarray:
    """``r[i, s1, s2] = ||y_i - P R_s x||^2`` for all observations and shifts."""
    x = validate_image(x)
    maps = _ResidualMaps(x, obs.params.K)
    return np.concatenate([maps.residuals(obs.frames[sl]) for sl in _chunks(len(obs), DEFAULT_CHUNK)]) \
        if len(obs) else np.empty((0, x.shape[0], x.shape[0]))


def _check(obs: ObservationSet, x, sigma: float):
    if not sigma > 0:
        raise ValueError("sigma must be positive for the likelihood")
    x = validate_image(x)
    if x.shape[0] != obs.params.L_high:
        raise ValueError(f"image side {x.shape[0]} does not match L_high={obs.params.L_high}")
    return x


def e_step(obs: ObservationSet, x, rho, sigma: float,
           chunk_size: int = DEFAULT_CHUNK) -> Responsibilities:
    x = _check(obs, x, sigma)
    log_rho = _log(_joint(rho))[None]
    maps = _ResidualMaps(x, obs.params.K)
    L = x.shape[0]
    log_w = np.empty((len(obs), L, L))
    log_norm = np.empty(len(obs))
    inv = 1.0 / (2.0 * sigma**2)
    for sl in _chunks(len(obs), chunk_size):
        a = log_rho - inv * maps.residuals(obs.frames[sl])
        z = logsumexp(a.reshape(a.shape[0], -1), axis=1)
        log_w[sl] = a - z[:, None, None]
        log_norm[sl] = z
    return Responsibilities(log_w, log_norm)


def log_likelihood(obs: ObservationSet, x, rho, sigma: float) -> float:
    """``sum_i log sum_s rho[s] exp(-||y_i - P R_s x||^2 / (2 sigma^2))``."""
    return e_step(obs, x, rho, sigma).loglik


def m_step_image(obs: ObservationSet, resp: Responsibilities, diag_floor: float = 1e-10,
                 chunk_size: int = DEFAULT_CHUNK, return_floored: bool = False,
                 x_prev=None):
    """Maximize the surrogate over the image.

    ``A[p] = sum_{i,s} w[i,s] [pixel p lands on the sampling grid under R_s]`` and
    ``b = sum_{i,s} w[i,s] R_{-s} P^T y_i``; the update is ``b / max(A, floor)``.
    With ``return_floored`` the number of floored pixels is returned as well.
    The surrogate does not depend on a pixel that no weighted shift samples;
    such pixels take their value from ``x_prev`` when it is given.
    """
    K = obs.params.K
    L = obs.params.L_high
    b_hat = np.zeros((L, L // 2 + 1), dtype=np.complex128)
    w_sum = np.zeros((L, L))
    for sl in _chunks(len(obs), chunk_size):
        w = np.exp(resp.log_w[sl])
        b_hat += np.sum(_upsampled_spectra(obs.frames[sl], K) * np.conj(np.fft.rfft2(w)), axis=0)
        w_sum += w.sum(axis=0)
    b = np.fft.irfft2(b_hat, s=(L, L))
    mask_hat = np.fft.rfft2(upsample_adjoint(np.ones((L // K, L // K)), K))
    A = np.fft.irfft2(mask_hat * np.conj(np.fft.rfft2(w_sum)), s=(L, L))
    floored = A < diag_floor
    x = b / np.where(floored, diag_floor, A)
    if x_prev is not None:
        x = np.where(floored, x_prev, x)
    n_floored = int(floored.sum())
    if n_floored:
        log.info("m-step floored %d unobserved pixels", n_floored)
    return (x, n_floored) if return_floored else x


def m_step_rho(resp: Responsibilities) -> ShiftDistribution:
    return ShiftDistribution.from_joint(np.exp(resp.log_w).mean(axis=0))


def q_value(obs: ObservationSet, resp: Responsibilities, x, rho, sigma: float) -> float:
    """EM surrogate ``sum_{i,s} w[i,s] (log rho[s] - ||y_i - P R_s x||^2 / (2 sigma^2))``."""
    x = _check(obs, x, sigma)
    j = _joint(rho)
    maps = _ResidualMaps(x, obs.params.K)
    inv = 1.0 / (2.0 * sigma**2)
    total = 0.0
    for sl in _chunks(len(obs), DEFAULT_CHUNK):
        w = np.exp(resp.log_w[sl])
        term_res = -inv * np.einsum("ijk,ijk->", w, maps.residuals(obs.frames[sl]))
        # 0 * log 0 counts as 0
        w_tot = w.sum(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            term_rho = np.where(w_tot > 0, w_tot * _log(j), 0.0).sum()
        total += term_res + term_rho
    return float(total)


def projected_em(obs: ObservationSet, sigma: float, denoiser: DenoiserHandle,
                 cfg: EmSolverConfig, init=None, x_true=None) -> Estimate:
    """EM with the image passed through ``denoiser`` after every block of ``F`` iterations.

    ``trace[k]`` describes the EM iterate after ``k`` iterations. The stopping
    test compares the log-likelihood at the end of consecutive blocks, before
    any projection, and the run returns that data-consistent iterate. When a
    projection follows iteration ``k``, ``trace[k]`` also carries its
    ``sigma_denoise`` and the log-likelihood just after it. ``x_true`` is only
    used to log the error.
    """
    if len(obs) == 0:
        raise ValueError("projected EM needs at least one observation")
    t0 = time.perf_counter()
    L = obs.params.L_high
    if init is None:
        init = random_initialization(L, cfg.seed)
    x = np.array(init[0], dtype=np.float64)
    rho = init[1] if isinstance(init[1], ShiftDistribution) else ShiftDistribution.from_joint(init[1])
    project = denoiser.kind != "identity"
    schedule = DenoiseSchedule()

    def record(it, resp, floored):
        rec = {"iter": it, "loglik": resp.loglik, "floored_pixels": floored, "sigma_denoise": None}
        if x_true is not None:
            rec["error"] = shift_aligned_error(x, x_true).error
        rec["seconds"] = time.perf_counter() - t0
        trace.append(rec)
        return rec

    trace = []
    resp = e_step(obs, x, rho, sigma, cfg.chunk_size)
    rec = record(0, resp, 0)
    block_start_ll = resp.loglik
    it = 0
    while it < cfg.max_outer:
        for _ in range(min(cfg.F, cfg.max_outer - it)):
            x, floored = m_step_image(obs, resp, cfg.diag_floor, cfg.chunk_size,
                                      return_floored=True, x_prev=x)
            rho = m_step_rho(resp)
            it += 1
            resp = e_step(obs, x, rho, sigma, cfg.chunk_size)
            rec = record(it, resp, floored)
        ll = resp.loglik
        change = abs(ll - block_start_ll) / max(abs(block_start_ll), np.finfo(float).tiny)
        if change < cfg.stop_tol:
            log.debug("stopping after %d EM iterations", it)
            break
        block_start_ll = ll
        if it == cfg.max_outer or not project:
            continue
        sigma_d = schedule.sigma_current
        try:
            x = denoiser(x, sigma_d)
        except Exception as exc:
            raise DenoiserError(
                f"denoiser {denoiser.label!r} failed after EM iteration {it}: {exc}"
            ) from exc
        schedule = schedule_next(schedule)
        if cfg.rho_mix:
            # restore support lost to underflow so the next E-step can reassign frames
            rho = ShiftDistribution.from_joint(
                (1.0 - cfg.rho_mix) * rho.joint + cfg.rho_mix / (L * L))
        resp = e_step(obs, x, rho, sigma, cfg.chunk_size)
        rec["sigma_denoise"] = sigma_d
        rec["loglik_projected"] = resp.loglik

    meta = {
        "solver": "em",
        "config": cfg.to_dict(),
        "denoiser": denoiser.to_dict(),
        "sigma": sigma,
        "N": len(obs),
        "iterations": it,
        "projections": schedule.t,
    }
    return Estimate(x, rho, trace, meta)
