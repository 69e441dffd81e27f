"""Recovery error up to circular translation, and SNR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DimensionError, circular_shift, validate_image

LOW_NOISE_SIGMA = 1.0 / 8.0
MEDIUM_NOISE_SIGMA = 1.0 / 2.0


@dataclass(frozen=True)
class ErrorReport:
    """``error`` is ``min_s ||R_s x_hat - x|| / ||x||``.

    ``best_shift`` is the offset of the estimate relative to the reference,
    i.e. ``x_hat`` is closest to ``circular_shift(x, best_shift)``.
    """

    error: float
    best_shift: tuple[int, int]
    snr: float | None = None


def shift_correlation(a, b) -> np.ndarray:
    """``c[s] = <circular_shift(b, s), a>`` for every shift, via one FFT product."""
    return np.fft.irfft2(np.fft.rfft2(a) * np.conj(np.fft.rfft2(b)), s=np.shape(a))


def shift_aligned_error(x_hat, x, sigma: float | None = None) -> ErrorReport:
    x_hat = validate_image(x_hat, "estimate")
    x = validate_image(x, "reference")
    if x_hat.shape != x.shape:
        raise DimensionError(f"estimate is {x_hat.shape}, reference is {x.shape}")
    ref_norm = np.linalg.norm(x)
    if ref_norm == 0:
        raise ValueError("reference image is zero; relative error undefined")
    corr = shift_correlation(x, x_hat)
    s = np.unravel_index(int(np.argmax(corr)), corr.shape)
    # the residual at the winning shift is recomputed directly, not from the expansion
    err = np.linalg.norm(circular_shift(x_hat, s) - x) / ref_norm
    L1, L2 = x.shape
    best = ((-int(s[0])) % L1, (-int(s[1])) % L2)
    return ErrorReport(float(err), best, None if sigma is None else snr(x, sigma))


def snr(x, sigma: float) -> float:
    """``||x||_F^2 / (L**2 sigma**2)``."""
    if sigma <= 0:
        raise ValueError("SNR needs sigma > 0")
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * x) / (x.size * sigma**2))


def noise_regime(sigma: float) -> str:
    """Label used in harness output for the two reference noise levels."""
    if sigma <= LOW_NOISE_SIGMA:
        return "low"
    if sigma <= MEDIUM_NOISE_SIGMA:
        return "medium"
    return "high"
