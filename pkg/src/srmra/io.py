"""Binary image formats.

Two encodings are supported:

* ``SRMR1`` -- exact. Magic ``b"SRMR1\\n"``, then ``rows`` and ``cols`` as
  little-endian ``uint32``, then ``rows * cols`` little-endian ``float64``
  values in row-major order.
* Binary PGM (``P5``), 8 bit, for looking at things. Values in [0, 1] are
  quantized by ``round(255 * p)``; anything outside is clipped first.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

SRMR1_MAGIC = b"SRMR1\n"
_HEADER = struct.Struct("<II")


class FormatError(ValueError):
    """Raised when a blob does not follow the expected binary layout."""


def encode_srmr1(array: np.ndarray) -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"SRMR1 stores 2-D arrays, got shape {a.shape}")
    rows, cols = a.shape
    return SRMR1_MAGIC + _HEADER.pack(rows, cols) + a.astype("<f8").tobytes(order="C")


def read_srmr1_stream(stream: BinaryIO) -> np.ndarray:
    """Read exactly one SRMR1 blob from ``stream``."""
    magic = _read_exact(stream, len(SRMR1_MAGIC))
    if magic != SRMR1_MAGIC:
        raise FormatError(f"bad SRMR1 magic {magic!r}")
    rows, cols = _HEADER.unpack(_read_exact(stream, _HEADER.size))
    payload = _read_exact(stream, 8 * rows * cols)
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def decode_srmr1(blob: bytes) -> np.ndarray:
    stream = io.BytesIO(blob)
    out = read_srmr1_stream(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after SRMR1 payload")
    return out


def save_srmr1(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_srmr1(array))


def load_srmr1(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_srmr1(fh.read())


def save_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write ``image`` (values nominally in [0, 1]) as an 8-bit binary PGM."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    q = np.round(255.0 * np.clip(a, 0.0, 1.0)).astype(np.uint8)
    rows, cols = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(q.tobytes(order="C"))


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit binary PGM and return values divided by 255."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace and comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM: {tokens[0]!r}")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError("only 8-bit PGM is supported")
    raw = np.frombuffer(data[pos : pos + rows * cols], dtype=np.uint8)
    if raw.size != rows * cols:
        raise FormatError("truncated PGM payload")
    return raw.reshape(rows, cols).astype(np.float64) / maxval


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise FormatError(f"unexpected end of stream ({len(buf)} of {n} bytes)")
        buf.extend(chunk)
    return bytes(buf)
