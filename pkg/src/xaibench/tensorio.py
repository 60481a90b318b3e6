"""Planar float32 tensor files: 16-byte header (magic, C, H, W) then C*H*W floats, little-endian."""
from __future__ import annotations

import struct

import numpy as np

MAGIC = b"XTNS"
_HEADER = struct.Struct("<4sIII")


class TensorFormatError(ValueError):
    pass


def save_tensor(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise TensorFormatError(f"expected (C, H, W) or (H, W), got shape {a.shape}")
    c, h, w = a.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, c, h, w))
        f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise TensorFormatError("file shorter than header")
    magic, c, h, w = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    body = data[_HEADER.size:]
    if len(body) != 4 * c * h * w:
        raise TensorFormatError(f"payload has {len(body)} bytes, expected {4 * c * h * w}")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float64)
