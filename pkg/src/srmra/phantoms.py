"""Deterministic synthetic test images."""

from __future__ import annotations

import numpy as np

from .model import normalize_image

NAMES = ("blobs", "checker", "shepp_like")

# (row, col, sigma_major, sigma_minor, angle, amplitude); lengths relative to L
_BLOBS = (
    (0.30, 0.28, 0.12, 0.06, 0.4, 1.0),
    (0.68, 0.62, 0.10, 0.08, -0.9, 0.8),
    (0.22, 0.74, 0.07, 0.04, 1.3, 0.7),
    (0.78, 0.18, 0.09, 0.05, 0.1, 0.6),
    (0.50, 0.47, 0.05, 0.05, 0.0, 0.5),
)

# (row, col, semi-axis rows, semi-axis cols, angle, intensity), Shepp-Logan flavoured
_ELLIPSES = (
    (0.50, 0.50, 0.40, 0.30, 0.0, 1.0),
    (0.51, 0.50, 0.36, 0.27, 0.0, -0.6),
    (0.50, 0.39, 0.16, 0.06, -0.3, -0.25),
    (0.50, 0.61, 0.20, 0.08, 0.3, -0.25),
    (0.32, 0.50, 0.10, 0.12, 0.0, 0.35),
    (0.70, 0.45, 0.05, 0.04, 0.0, 0.3),
    (0.70, 0.57, 0.04, 0.05, 0.0, 0.3),
)


def builtin_phantom(name: str, L: int, K: int = 2) -> np.ndarray:
    """A synthetic ``L x L`` image normalized to [0, 1].

    ``blobs`` is a sum of periodically wrapped anisotropic Gaussians,
    ``checker`` a checkerboard of ``K x K`` squares (period ``2K``), and
    ``shepp_like`` a stack of overlapping ellipses.
    """
    if L < 8:
        raise ValueError("phantoms need L >= 8")
    if name == "blobs":
        img = _blobs(L)
    elif name == "checker":
        i = np.arange(L)
        img = ((i[:, None] // K + i[None, :] // K) % 2).astype(np.float64)
    elif name == "shepp_like":
        img = _ellipses(L)
    else:
        raise ValueError(f"unknown phantom {name!r}; choose from {NAMES}")
    out, _ = normalize_image(img)
    return out


def _wrapped_offsets(L: int, c: float) -> np.ndarray:
    d = np.arange(L) - c * L
    return (d + L / 2) % L - L / 2


def _blobs(L: int) -> np.ndarray:
    img = np.zeros((L, L))
    for r, c, smaj, smin, ang, amp in _BLOBS:
        dr = _wrapped_offsets(L, r)[:, None]
        dc = _wrapped_offsets(L, c)[None, :]
        u = np.cos(ang) * dr + np.sin(ang) * dc
        v = -np.sin(ang) * dr + np.cos(ang) * dc
        img += amp * np.exp(-0.5 * ((u / (smaj * L)) ** 2 + (v / (smin * L)) ** 2))
    return img


def _ellipses(L: int) -> np.ndarray:
    img = np.zeros((L, L))
    grid = (np.arange(L) + 0.5) / L
    rr, cc = np.meshgrid(grid, grid, indexing="ij")
    for r, c, ar, ac, ang, val in _ELLIPSES:
        u = np.cos(ang) * (rr - r) + np.sin(ang) * (cc - c)
        v = -np.sin(ang) * (rr - r) + np.cos(ang) * (cc - c)
        img[(u / ar) ** 2 + (v / ac) ** 2 <= 1.0] += val
    return img
