"""First and second moments of SR-MRA data.

Frames are vectorized row-major into length ``L_low**2`` vectors. For an
image ``x`` and joint shift distribution ``rho`` the analytic moments are::

    m1 = sum_s rho[s] v_s
    m2 = sum_s rho[s] v_s v_s^T + sigma^2 I,      v_s = vec(P R_s x)

The production path never forms the ``L_high**2 x L_high**2`` circulant
matrix; ``m1`` goes through an FFT convolution and the stack of decimated
shifted copies ``v_s`` is gathered with a cached index table.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable

import numpy as np

from . import io as srmr_io
from .model import (
    DimensionError,
    ObservationSet,
    ShiftDistribution,
    circular_shift,
    downsample,
    validate_image,
)

MAX_L_LOW = 96
DENSE_ORACLE_MAX_L = 16
TRUNCATION_MASS = 1.0 - 1e-12
DEFAULT_CHUNK_SIZE = 1024


class MemoryGuardError(RuntimeError):
    pass


@dataclass
class MomentPair:
    m1: np.ndarray
    m2: np.ndarray
    sigma_used: float = 0.0
    N: int | None = None
    chunk_size: int | None = None

    def __post_init__(self):
        self.m1 = np.asarray(self.m1, dtype=np.float64).ravel()
        self.m2 = np.asarray(self.m2, dtype=np.float64)
        n = self.m1.size
        if self.m2.shape != (n, n):
            raise DimensionError(f"m2 must be {n}x{n}, got {self.m2.shape}")

    @property
    def L_low(self) -> int:
        return int(round(np.sqrt(self.m1.size)))

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        srmr_io.save_srmr1(d / "m1.srmr", self.m1[:, None])
        srmr_io.save_srmr1(d / "m2.srmr", self.m2)
        meta = {
            "L_low": self.L_low,
            "N": self.N,
            "sigma_used": self.sigma_used,
            "chunk_size": self.chunk_size,
        }
        (d / "moments.json").write_text(json.dumps(meta, indent=2))
        return d

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "MomentPair":
        d = Path(directory)
        meta = json.loads((d / "moments.json").read_text())
        return cls(
            srmr_io.load_srmr1(d / "m1.srmr").ravel(),
            srmr_io.load_srmr1(d / "m2.srmr"),
            sigma_used=meta["sigma_used"],
            N=meta["N"],
            chunk_size=meta["chunk_size"],
        )


@dataclass(frozen=True)
class ObjectiveWeights:
    """Weight of the first-moment term in the least-squares objective."""

    lam: float

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    @classmethod
    def default(cls, L_high: int, sigma: float) -> "ObjectiveWeights":
        return cls(1.0 / (L_high**2 * (1.0 + sigma**2)))


def _check_low_res(L_low: int, allow_large: bool) -> None:
    if L_low > MAX_L_LOW and not allow_large:
        raise MemoryGuardError(
            f"L_low={L_low} exceeds {MAX_L_LOW}; the dense second moment would need "
            f"{8 * L_low**4 / 2**30:.1f} GiB. Pass allow_large=True to override."
        )


@lru_cache(maxsize=16)
def shift_index_table(L: int, K: int) -> np.ndarray:
    """Flat pixel indices of ``P R_s x`` for every shift.

    Row ``s1*L + s2`` holds, for each low-res pixel ``n1*L_low + n2``, the flat
    index of ``x[(n1*K - s1) mod L, (n2*K - s2) mod L]``.
    """
    if L % K:
        raise DimensionError(f"K={K} does not divide L={L}")
    grid = np.arange(L // K) * K
    s = np.arange(L)
    rows = (grid[None, :] - s[:, None]) % L  # (s1, n1)
    table = rows[:, None, :, None] * L + rows[None, :, None, :]
    table = table.reshape(L * L, (L // K) ** 2)
    table.setflags(write=False)
    return table


def shifted_frames(x, K: int) -> np.ndarray:
    """Stack of ``vec(P R_s x)`` for all ``L**2`` shifts, shape ``(L**2, L_low**2)``."""
    x = np.asarray(x, dtype=np.float64)
    return x.ravel()[shift_index_table(x.shape[0], K)]


def circular_convolution(x, kernel) -> np.ndarray:
    """``sum_s kernel[s] * circular_shift(x, s)`` via real FFTs."""
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape
    return np.fft.irfft2(np.fft.rfft2(x) * np.fft.rfft2(kernel), s=shape)


def _as_joint(rho, L: int) -> np.ndarray:
    j = rho.joint if isinstance(rho, ShiftDistribution) else np.asarray(rho, dtype=np.float64)
    if j.shape != (L, L):
        raise DimensionError(f"shift distribution is {j.shape}, image side is {L}")
    return j


def empirical_moments(
    obs: ObservationSet | Iterable[np.ndarray],
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    allow_large: bool = False,
) -> MomentPair:
    """Raw empirical moments in a single pass.

    ``obs`` may be an :class:`ObservationSet` or any iterable of frames (the
    streaming path used for frames on disk). Frames are accumulated in chunks
    of ``chunk_size`` and chunk sums are combined in index order, so the
    result is bit-stable for a given chunk size.
    """
    frames = obs.frames if isinstance(obs, ObservationSet) else obs
    s1 = s2 = None
    buf: list[np.ndarray] = []
    count = 0

    def flush():
        nonlocal s1, s2
        Y = np.stack(buf).reshape(len(buf), -1)
        if s1 is None:
            _check_low_res(int(round(np.sqrt(Y.shape[1]))), allow_large)
            s1 = np.zeros(Y.shape[1])
            s2 = np.zeros((Y.shape[1], Y.shape[1]))
        s1 += Y.sum(axis=0)
        s2 += Y.T @ Y
        buf.clear()

    for frame in frames:
        buf.append(np.asarray(frame, dtype=np.float64))
        count += 1
        if len(buf) == chunk_size:
            flush()
    if buf:
        flush()
    if count == 0:
        raise ValueError("cannot compute moments of an empty observation set")
    m2 = s2 / count
    m2 = 0.5 * (m2 + m2.T)
    return MomentPair(s1 / count, m2, sigma_used=0.0, N=count, chunk_size=chunk_size)


def analytic_m1(x, rho, K: int) -> np.ndarray:
    x = validate_image(x)
    j = _as_joint(rho, x.shape[0])
    return downsample(circular_convolution(x, j), K).ravel()


def analytic_m2(x, rho, sigma: float, K: int, allow_large: bool = False) -> np.ndarray:
    """Second moment, skipping the lightest shifts once the kept mass reaches 1 - 1e-12."""
    x = validate_image(x)
    L = x.shape[0]
    _check_low_res(L // K, allow_large)
    w = _as_joint(rho, L).ravel()
    order = np.argsort(-w, kind="stable")
    cum = np.cumsum(w[order])
    keep = order[: int(np.searchsorted(cum, TRUNCATION_MASS * cum[-1])) + 1]
    keep = keep[w[keep] > 0]
    V = x.ravel()[shift_index_table(L, K)[keep]]
    m2 = V.T @ (w[keep, None] * V)
    m2 = 0.5 * (m2 + m2.T)
    m2[np.diag_indices_from(m2)] += sigma**2
    return m2


def analytic_moments(x, rho, sigma: float, K: int) -> MomentPair:
    return MomentPair(analytic_m1(x, rho, K), analytic_m2(x, rho, sigma, K), sigma_used=sigma)


def bccb_matrix(x) -> np.ndarray:
    """Dense block-circulant matrix whose column ``s1*L + s2`` is ``vec(R_s x)``.

    Test oracle only; refuses ``L > 16``.
    """
    x = validate_image(x)
    L = x.shape[0]
    if L > DENSE_ORACLE_MAX_L:
        raise MemoryGuardError(f"bccb_matrix is an oracle for L <= {DENSE_ORACLE_MAX_L}")
    C = np.empty((L * L, L * L))
    for s1 in range(L):
        for s2 in range(L):
            C[:, s1 * L + s2] = circular_shift(x, (s1, s2)).ravel()
    return C


def decimation_matrix(L: int, K: int) -> np.ndarray:
    """Dense ``P`` (selection rows), for the oracle path."""
    Ll = L // K
    P = np.zeros((Ll * Ll, L * L))
    for n1 in range(Ll):
        for n2 in range(Ll):
            P[n1 * Ll + n2, (n1 * K) * L + n2 * K] = 1.0
    return P


def _residuals(V, w, target: MomentPair, sigma: float):
    m1 = V.T @ w
    m2 = V.T @ (w[:, None] * V)
    m2[np.diag_indices_from(m2)] += sigma**2
    E = m2 - target.m2
    r = m1 - target.m1
    return E, r


def _factor(L: int, target: MomentPair) -> int:
    Ll = target.L_low
    if Ll * Ll != target.m1.size or Ll == 0 or L % Ll:
        raise DimensionError(
            f"target moments (length {target.m1.size}) do not fit an image of side {L}"
        )
    return L // Ll


def ls_objective(x, rho, target: MomentPair, sigma: float,
                 weights: ObjectiveWeights | None = None) -> float:
    """``||m2(x, rho) - target.m2||_F^2 + lam * ||m1(x, rho) - target.m1||^2``.

    The decimation factor is read off the size of ``target``; ``weights``
    defaults to ``lam = 1 / (L**2 (1 + sigma**2))``.
    """
    x = validate_image(x)
    L = x.shape[0]
    K = _factor(L, target)
    weights = weights or ObjectiveWeights.default(L, sigma)
    E, r = _residuals(shifted_frames(x, K), _as_joint(rho, L).ravel(), target, sigma)
    return float(np.sum(E * E) + weights.lam * (r @ r))


def ls_value_and_grad(x, rho: ShiftDistribution, target: MomentPair, sigma: float,
                      weights: ObjectiveWeights | None = None):
    """Objective together with its gradient.

    Returns ``(value, grad_x, grad_rho1, grad_rho2)``; the marginal gradients
    come from the chain rule through ``joint = outer(rho1, rho2)``.
    """
    x = validate_image(x)
    L = x.shape[0]
    K = _factor(L, target)
    weights = weights or ObjectiveWeights.default(L, sigma)
    idx = shift_index_table(L, K)
    V = x.ravel()[idx]
    w = np.outer(rho.rho1, rho.rho2).ravel()
    E, r = _residuals(V, w, target, sigma)
    lam = weights.lam
    value = float(np.sum(E * E) + lam * (r @ r))

    VE = V @ E
    # d/dV: 4 diag(w) V E + 2 lam w r^T ; d/dw: 2 v_s^T E v_s + 2 lam v_s^T r
    G = 4.0 * w[:, None] * VE + (2.0 * lam) * np.outer(w, r)
    grad_x = np.bincount(idx.ravel(), weights=G.ravel(), minlength=L * L).reshape(L, L)
    grad_w = (2.0 * np.einsum("ij,ij->i", VE, V) + (2.0 * lam) * (V @ r)).reshape(L, L)
    return value, grad_x, grad_w @ rho.rho2, grad_w.T @ rho.rho1


def ls_gradient(x, rho: ShiftDistribution, target: MomentPair, sigma: float,
                weights: ObjectiveWeights | None = None):
    """Gradient of :func:`ls_objective` in ``x`` and in the two marginals."""
    _, gx, g1, g2 = ls_value_and_grad(x, rho, target, sigma, weights)
    return gx, g1, g2
