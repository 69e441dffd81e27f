"""The SR-MRA forward model.

An observation is a circularly translated copy of a square high-resolution
image, decimated by an integer factor ``K`` in each axis, plus white
Gaussian noise::

    y[n1, n2] = x[(n1*K - s1) mod L, (n2*K - s2) mod L] + eps[n1, n2]

Images are plain ``float64`` numpy arrays of shape ``(L, L)``. Shift pairs
``(s1, s2)`` act on axis 0 and axis 1 respectively.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as srmr_io

_SIMPLEX_TOL = 1e-12


class DimensionError(ValueError):
    """Inconsistent sizes between images, distributions, and parameters."""


def validate_image(x, name="image") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"{name} must be a square 2-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} has non-finite entries")
    return x


def normalize_image(x) -> tuple[np.ndarray, bool]:
    """Affinely rescale ``x`` onto [0, 1].

    Returns the rescaled image and a flag that is True when ``x`` is constant,
    in which case it is returned unchanged.
    """
    x = validate_image(x)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return x.copy(), True
    out = (x - lo) / (hi - lo)
    # pin the extremes exactly; the division can land a few ulps off
    out[x == lo] = 0.0
    out[x == hi] = 1.0
    return out, False


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    cond = u - css / k > 0
    r = k[cond][-1]
    theta = css[cond][-1] / r
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


@dataclass(frozen=True)
class ShiftDistribution:
    """Distribution of the 2-D translations.

    ``rho1`` governs ``s1`` (axis 0) and ``rho2`` governs ``s2`` (axis 1).
    When ``joint`` is omitted the shifts are independent and the joint is
    the outer product of the marginals.
    """

    rho1: np.ndarray
    rho2: np.ndarray
    _joint: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("rho1", "rho2"):
            r = np.asarray(getattr(self, name), dtype=np.float64)
            if r.ndim != 1:
                raise DimensionError(f"{name} must be a vector")
            _check_simplex(r, name)
            object.__setattr__(self, name, r)
        if self.rho1.size != self.rho2.size:
            raise DimensionError("rho1 and rho2 must have the same length")
        if self._joint is not None:
            j = np.asarray(self._joint, dtype=np.float64)
            if j.shape != (self.L, self.L):
                raise DimensionError(f"joint must be {self.L}x{self.L}, got {j.shape}")
            _check_simplex(j, "joint")
            object.__setattr__(self, "_joint", j)

    @property
    def L(self) -> int:
        return self.rho1.size

    @property
    def is_separable(self) -> bool:
        return self._joint is None

    @property
    def joint(self) -> np.ndarray:
        if self._joint is not None:
            return self._joint
        return np.outer(self.rho1, self.rho2)

    @classmethod
    def from_marginals(cls, rho1, rho2) -> "ShiftDistribution":
        rho1 = np.asarray(rho1, dtype=np.float64)
        rho2 = np.asarray(rho2, dtype=np.float64)
        return cls(rho1 / rho1.sum(), rho2 / rho2.sum())

    @classmethod
    def from_joint(cls, joint) -> "ShiftDistribution":
        j = np.asarray(joint, dtype=np.float64)
        if np.any(j < 0):
            raise ValueError("joint distribution has negative entries")
        j = j / j.sum()
        return cls(j.sum(axis=1), j.sum(axis=0), j)

    @classmethod
    def uniform(cls, L: int) -> "ShiftDistribution":
        return cls(np.full(L, 1.0 / L), np.full(L, 1.0 / L))

    @classmethod
    def point_mass(cls, L: int, s) -> "ShiftDistribution":
        r1 = np.zeros(L)
        r2 = np.zeros(L)
        r1[s[0] % L] = 1.0
        r2[s[1] % L] = 1.0
        return cls(r1, r2)

    @classmethod
    def random(cls, L: int, rng: np.random.Generator) -> "ShiftDistribution":
        """Marginals drawn i.i.d. uniform on [0, 1], then normalized."""
        return cls.from_marginals(rng.uniform(size=L), rng.uniform(size=L))


def _check_simplex(r: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(r)) or np.any(r < 0):
        raise ValueError(f"{name} must be finite and nonnegative")
    total = r.sum()
    if abs(total - 1.0) > _SIMPLEX_TOL:
        raise ValueError(f"{name} sums to {total!r}, expected 1")


def shift_of(rho: ShiftDistribution, s) -> ShiftDistribution:
    """Relabel ``rho`` to match an image translated by ``s``.

    If ``x' = circular_shift(x, s)`` then ``(x', shift_of(rho, s))`` generates
    exactly the same observation distribution as ``(x, rho)``; the returned
    distribution puts the mass of ``rho[u]`` at ``u - s``.
    """
    s1, s2 = int(s[0]), int(s[1])
    if rho.is_separable:
        return ShiftDistribution(np.roll(rho.rho1, -s1), np.roll(rho.rho2, -s2))
    return ShiftDistribution.from_joint(np.roll(rho.joint, (-s1, -s2), axis=(0, 1)))


@dataclass(frozen=True)
class ModelParams:
    L_high: int
    K: int
    sigma: float
    N: int

    def __post_init__(self):
        if self.L_high < 1 or self.K < 1:
            raise ValueError("L_high and K must be positive")
        if self.L_high % self.K:
            raise DimensionError(f"K={self.K} does not divide L_high={self.L_high}")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.N < 0:
            raise ValueError("N must be nonnegative")

    @property
    def L_low(self) -> int:
        return self.L_high // self.K

    def to_dict(self) -> dict:
        return {"L_high": self.L_high, "K": self.K, "sigma": self.sigma, "N": self.N}


@dataclass
class ObservationSet:
    """``frames`` has shape ``(N, L_low, L_low)``.

    ``true_shifts`` is kept for diagnostics; estimators never look at it.
    """

    frames: np.ndarray
    params: ModelParams
    true_shifts: np.ndarray | None = None
    seed: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        p = self.params
        if self.frames.shape != (p.N, p.L_low, p.L_low):
            raise DimensionError(
                f"frames have shape {self.frames.shape}, params imply "
                f"{(p.N, p.L_low, p.L_low)}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("observation frames have non-finite entries")

    def __len__(self) -> int:
        return self.frames.shape[0]


def circular_shift(x, s) -> np.ndarray:
    """``out[n1, n2] = x[(n1 - s1) mod L, (n2 - s2) mod L]``."""
    x = np.asarray(x)
    return np.roll(x, (int(s[0]) % x.shape[0], int(s[1]) % x.shape[1]), axis=(0, 1))


def downsample(x, K: int) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[0] % K or x.shape[1] % K:
        raise DimensionError(f"K={K} does not divide image side {x.shape[0]}")
    return x[::K, ::K].copy()


def upsample_adjoint(y, K: int) -> np.ndarray:
    """Zero-insertion upsampling, the adjoint of :func:`downsample`."""
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros((y.shape[0] * K, y.shape[1] * K))
    out[::K, ::K] = y
    return out


def observe(x: np.ndarray, s, K: int) -> np.ndarray:
    """Noiseless observation ``P R_s x`` evaluated by direct indexing."""
    L = x.shape[0]
    grid = np.arange(L // K) * K
    rows = (grid - int(s[0])) % L
    cols = (grid - int(s[1])) % L
    return x[np.ix_(rows, cols)]


def observation_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based stream for observation ``index``.

    Streams for different indices occupy disjoint counter ranges of the same
    Philox key, so a frame does not depend on how many others were drawn or
    in which order.
    """
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(index), 0]))


def sample_observations(
    x, rho: ShiftDistribution, params: ModelParams, seed: int, workers: int = 1
) -> ObservationSet:
    x = validate_image(x)
    L = params.L_high
    if x.shape != (L, L):
        raise DimensionError(f"image is {x.shape}, params say L_high={L}")
    if rho.L != L:
        raise DimensionError(f"shift distribution has length {rho.L}, expected {L}")
    if seed < 0:
        raise ValueError("seed must be nonnegative")

    if rho.is_separable:
        cdfs = (np.cumsum(rho.rho1), np.cumsum(rho.rho2))
    else:
        cdf_joint = np.cumsum(rho.joint.ravel())

    def one(i):
        rng = observation_rng(seed, i)
        u = rng.random(2)
        if rho.is_separable:
            s = (_draw(cdfs[0], u[0]), _draw(cdfs[1], u[1]))
        else:
            s = divmod(_draw(cdf_joint, u[0]), L)
        frame = observe(x, s, params.K)
        if params.sigma > 0:
            frame = frame + params.sigma * rng.standard_normal(frame.shape)
        return frame, s

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(params.N)))
    else:
        results = [one(i) for i in range(params.N)]

    frames = np.empty((params.N, params.L_low, params.L_low))
    shifts = np.empty((params.N, 2), dtype=np.int64)
    for i, (f, s) in enumerate(results):
        frames[i] = f
        shifts[i] = s
    return ObservationSet(frames, params, true_shifts=shifts, seed=seed)


def _draw(cdf: np.ndarray, u: float) -> int:
    # inverse-CDF draw; the clamp covers cdf[-1] landing a hair below 1
    return min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), cdf.size - 1)


def subimage_decompose(x, K: int) -> np.ndarray:
    """Split ``x`` into ``K x K`` interleaved tiles.

    Returns an array of shape ``(K, K, L_low, L_low)`` with
    ``tiles[n1, n2][l1, l2] = x[n1 + l1*K, n2 + l2*K]``.
    """
    x = np.asarray(x)
    L = x.shape[0]
    if x.ndim != 2 or x.shape[1] != L:
        raise DimensionError("expected a square image")
    if L % K:
        raise DimensionError(f"K={K} does not divide image side {L}")
    Ll = L // K
    return x.reshape(Ll, K, Ll, K).transpose(1, 3, 0, 2).copy()


def subimage_compose(tiles, K: int) -> np.ndarray:
    tiles = np.asarray(tiles)
    if tiles.ndim != 4 or tiles.shape[:2] != (K, K) or tiles.shape[2] != tiles.shape[3]:
        raise DimensionError(
            f"expected tiles of shape (K, K, l, l) with K={K}, got {tiles.shape}"
        )
    Ll = tiles.shape[2]
    return tiles.transpose(2, 0, 3, 1).reshape(Ll * K, Ll * K).copy()


def _split_shift(s: np.ndarray, K: int, L_low: int) -> tuple[np.ndarray, np.ndarray]:
    # y = P R_s x  equals  R_t x_n  on the low-res grid, per axis
    n = (-s) % K
    t = ((s + n) // K) % L_low
    return n, t


def equivalent_params(x, rho_joint, perm, tile_shifts) -> tuple[np.ndarray, np.ndarray]:
    """Build a different ``(image, joint distribution)`` with the same likelihood.

    Tile ``j`` (flattened index ``n1*K + n2``) of the decomposition of ``x``
    is circularly shifted on the low-resolution grid by ``tile_shifts[n1, n2]``
    and placed at flattened position ``perm[j]``. The joint distribution is
    relabelled so every observation keeps the same mixture of noiseless
    frames.

    Parameters
    ----------
    x : ndarray, shape (L, L)
    rho_joint : ndarray, shape (L, L)
        Joint shift distribution, ``rho_joint[s1, s2]``.
    perm : sequence of int, length K**2
    tile_shifts : ndarray, shape (K, K, 2)

    Returns
    -------
    x_new, rho_new : ndarray
    """
    x = validate_image(x)
    rho_joint = np.asarray(rho_joint, dtype=np.float64)
    L = x.shape[0]
    perm = np.asarray(perm, dtype=np.int64)
    K = int(round(np.sqrt(perm.size)))
    if K * K != perm.size or sorted(perm.tolist()) != list(range(K * K)):
        raise DimensionError("perm must be a permutation of K**2 tile indices")
    if L % K:
        raise DimensionError(f"K={K} does not divide image side {L}")
    tile_shifts = np.asarray(tile_shifts, dtype=np.int64)
    if tile_shifts.shape != (K, K, 2):
        raise DimensionError(f"tile_shifts must have shape {(K, K, 2)}")
    if rho_joint.shape != (L, L):
        raise DimensionError("rho_joint must match the image size")
    Ll = L // K

    tiles = subimage_decompose(x, K)
    new_tiles = np.empty_like(tiles)
    for j in range(K * K):
        n1, n2 = divmod(j, K)
        m1, m2 = divmod(int(perm[j]), K)
        new_tiles[m1, m2] = circular_shift(tiles[n1, n2], tile_shifts[n1, n2])
    x_new = subimage_compose(new_tiles, K)

    # R_t x_n = R_{t - tau_n} x'_{perm(n)}, so rho[n, t] moves to rho'[perm(n), t - tau_n]
    s = np.arange(L)
    n_a, t_a = _split_shift(s, K, Ll)
    rho_new = np.zeros_like(rho_joint)
    for s1 in range(L):
        for s2 in range(L):
            j = n_a[s1] * K + n_a[s2]
            m1, m2 = divmod(int(perm[j]), K)
            tau = tile_shifts[n_a[s1], n_a[s2]]
            t1 = (t_a[s1] - tau[0]) % Ll
            t2 = (t_a[s2] - tau[1]) % Ll
            rho_new[(t1 * K - m1) % L, (t2 * K - m2) % L] += rho_joint[s1, s2]
    return x_new, rho_new


def save_observations(obs: ObservationSet, directory: str | os.PathLike) -> Path:
    """One SRMR1 file per frame plus an ``observations.json`` sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    width = max(6, len(str(len(obs))))
    names = []
    for i, frame in enumerate(obs.frames):
        name = f"frame_{i:0{width}d}.srmr"
        srmr_io.save_srmr1(d / name, frame)
        names.append(name)
    meta = {
        "params": obs.params.to_dict(),
        "seed": obs.seed,
        "frames": names,
        "true_shifts": None if obs.true_shifts is None else obs.true_shifts.tolist(),
    }
    (d / "observations.json").write_text(json.dumps(meta, indent=2))
    return d


def _read_sidecar(directory) -> tuple[Path, dict]:
    d = Path(directory)
    return d, json.loads((d / "observations.json").read_text())


def iter_frames(directory: str | os.PathLike):
    """Stream frames from disk without holding the whole set in memory."""
    d, meta = _read_sidecar(directory)
    for name in meta["frames"]:
        yield srmr_io.load_srmr1(d / name)


def load_observations(directory: str | os.PathLike) -> ObservationSet:
    d, meta = _read_sidecar(directory)
    params = ModelParams(**meta["params"])
    frames = np.stack([srmr_io.load_srmr1(d / n) for n in meta["frames"]]) if meta["frames"] \
        else np.empty((0, params.L_low, params.L_low))
    shifts = meta.get("true_shifts")
    return ObservationSet(
        frames,
        params,
        true_shifts=None if shifts is None else np.asarray(shifts, dtype=np.int64),
        seed=meta.get("seed"),
    )
