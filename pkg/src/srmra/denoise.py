"""Denoisers used as projections, and their strength schedule.

Built-in kinds:

``identity``
    Returns the input.
``gaussian_blur``
    Circular convolution with an isotropic Gaussian whose standard deviation
    is ``blur_per_sigma * sigma_d`` pixels.
``dct_threshold``
    Sliding ``block x block`` orthonormal DCT-II over every circular window,
    hard thresholding of AC coefficients with magnitude below
    ``threshold * sigma_d``, and uniform averaging of the overlapping
    reconstructions.
``external``
    A subprocess speaking the ``SRMRD1`` protocol (see :func:`encode_request`),
    which is how a real BM3D binary or a learned denoiser gets attached.
"""

from __future__ import annotations

import struct
import subprocess
import sys
import threading
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

from . import io as srmr_io

REQUEST_MAGIC = b"SRMRD1\n"
DECAY = 2.0 ** (-1.0 / 10.0)
KINDS = ("identity", "gaussian_blur", "dct_threshold", "external")


class DenoiserError(RuntimeError):
    """A denoiser failed; the message names the denoiser."""


@dataclass(frozen=True)
class DenoiserHandle:
    kind: str = "dct_threshold"
    block: int = 8
    threshold: float = 3.0
    blur_per_sigma: float = 2.0
    command: tuple[str, ...] = ()
    timeout: float = 60.0
    sigma_scale: float = 1.0
    name: str | None = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown denoiser kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "external" and not self.command:
            raise ValueError("external denoiser needs a command line")
        object.__setattr__(self, "command", tuple(self.command))

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "external":
            return "external:" + " ".join(self.command)
        return self.kind

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "block": self.block,
            "threshold": self.threshold,
            "blur_per_sigma": self.blur_per_sigma,
            "command": list(self.command),
            "timeout": self.timeout,
            "sigma_scale": self.sigma_scale,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserHandle":
        d = dict(d)
        d["command"] = tuple(d.get("command", ()))
        return cls(**d)

    def __call__(self, x, sigma_d: float) -> np.ndarray:
        return denoise(self, x, sigma_d)


def denoise(handle: DenoiserHandle, x, sigma_d: float) -> np.ndarray:
    if sigma_d < 0:
        raise ValueError("denoiser strength must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if handle.kind == "identity":
        return x.copy()
    if handle.kind == "gaussian_blur":
        return gaussian_blur(x, handle.blur_per_sigma * sigma_d)
    if handle.kind == "dct_threshold":
        return dct_hard_threshold(x, sigma_d, block=handle.block, threshold=handle.threshold)
    return _run_external(handle, x, sigma_d)


def gaussian_blur(x: np.ndarray, width: float) -> np.ndarray:
    if width == 0:
        return x.copy()
    n1, n2 = x.shape
    f1 = np.fft.fftfreq(n1)[:, None]
    f2 = np.fft.rfftfreq(n2)[None, :]
    transfer = np.exp(-2.0 * (np.pi * width) ** 2 * (f1**2 + f2**2))
    return np.fft.irfft2(np.fft.rfft2(x) * transfer, s=x.shape)


def dct_hard_threshold(x: np.ndarray, sigma_d: float, block: int = 8,
                       threshold: float = 3.0) -> np.ndarray:
    n1, n2 = x.shape
    padded = np.pad(x, ((0, block - 1), (0, block - 1)), mode="wrap")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (block, block))
    coeffs = sfft.dctn(windows, type=2, norm="ortho", axes=(-2, -1))
    dc = coeffs[..., 0, 0].copy()
    coeffs[np.abs(coeffs) < threshold * sigma_d] = 0.0
    # the DC term carries the local mean; it is never thresholded
    coeffs[..., 0, 0] = dc
    patches = sfft.idctn(coeffs, type=2, norm="ortho", axes=(-2, -1))
    out = np.zeros_like(x)
    for a in range(block):
        for b in range(block):
            out += np.roll(patches[:, :, a, b], (a, b), axis=(0, 1))
    return out / (block * block)


@dataclass(frozen=True)
class DenoiseSchedule:
    """Denoiser strength after ``t`` applications: ``sigma_initial * 2**(-t/10)``."""

    t: int = 0
    sigma_initial: float = 1.0

    @property
    def sigma_current(self) -> float:
        return self.sigma_initial * 2.0 ** (-self.t / 10.0)

    @property
    def decay(self) -> float:
        return DECAY


def schedule_next(s: DenoiseSchedule) -> DenoiseSchedule:
    return DenoiseSchedule(s.t + 1, s.sigma_initial)


# -- external bridge --------------------------------------------------------


def encode_request(x: np.ndarray, sigma_d: float) -> bytes:
    return REQUEST_MAGIC + struct.pack("<d", float(sigma_d)) + srmr_io.encode_srmr1(x)


def decode_request(stream) -> tuple[np.ndarray, float]:
    magic = stream.read(len(REQUEST_MAGIC))
    if magic != REQUEST_MAGIC:
        raise srmr_io.FormatError(f"bad request magic {magic!r}")
    raw = stream.read(8)
    if len(raw) != 8:
        raise srmr_io.FormatError("truncated sigma field")
    (sigma_d,) = struct.unpack("<d", raw)
    return srmr_io.read_srmr1_stream(stream), sigma_d


def _run_external(handle: DenoiserHandle, x: np.ndarray, sigma_d: float) -> np.ndarray:
    request = encode_request(np.clip(x, 0.0, 1.0), sigma_d * handle.sigma_scale)
    with handle._lock:
        try:
            proc = subprocess.run(
                list(handle.command), input=request, capture_output=True,
                timeout=handle.timeout, check=False,
            )
        except subprocess.TimeoutExpired as exc:
            raise DenoiserError(
                f"denoiser {handle.label!r} timed out after {handle.timeout} s"
            ) from exc
        except OSError as exc:
            raise DenoiserError(f"denoiser {handle.label!r} could not start: {exc}") from exc
    if proc.returncode != 0:
        tail = proc.stderr.decode(errors="replace").strip()[-500:]
        raise DenoiserError(
            f"denoiser {handle.label!r} exited with status {proc.returncode}: {tail}"
        )
    try:
        out = srmr_io.decode_srmr1(proc.stdout)
    except srmr_io.FormatError as exc:
        raise DenoiserError(f"denoiser {handle.label!r} sent a malformed reply: {exc}") from exc
    if out.shape != x.shape:
        raise DenoiserError(
            f"denoiser {handle.label!r} returned shape {out.shape}, expected {x.shape}"
        )
    return out


def echo_main() -> int:
    """Test double: read one request from stdin and send the image back unchanged."""
    image, _ = decode_request(sys.stdin.buffer)
    sys.stdout.buffer.write(srmr_io.encode_srmr1(image))
    sys.stdout.buffer.flush()
    return 0


def echo_command() -> tuple[str, ...]:
    return (sys.executable, "-m", "srmra.echo_denoiser")
