"""Binary tensor interchange (FTS files).

Layout, little-endian throughout:

    magic  "FTS1"               4 bytes
    dtype  u8                   1 = 32-bit float
    ndim   u8
    dims   ndim x u32
    data   row-major float32 payload

Files carry 32-bit values; reading widens to float64, writing narrows.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = b"FTS1"
DTYPE_F32 = 1
MAX_NDIM = 8


def write_tensor(array: np.ndarray, path) -> None:
    """Write an array as an FTS file (values narrowed to float32)."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim == 0 or arr.ndim > MAX_NDIM:
        raise ValueError(f"tensor rank must be in [1, {MAX_NDIM}], got {arr.ndim}")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to write non-finite values")
    header = MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype("<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    """Read an FTS file into a float64 array."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise TensorFormatError("bad magic bytes", offset=0)
    if len(data) < 6:
        raise TensorFormatError("truncated header", offset=len(data))
    dtype_code, ndim = struct.unpack_from("<BB", data, 4)
    if dtype_code != DTYPE_F32:
        raise TensorFormatError(f"unknown dtype code {dtype_code}", offset=4)
    if ndim == 0 or ndim > MAX_NDIM:
        raise TensorFormatError(f"invalid rank {ndim}", offset=5)
    dims_end = 6 + 4 * ndim
    if len(data) < dims_end:
        raise TensorFormatError("truncated dimension list", offset=len(data))
    dims = struct.unpack_from(f"<{ndim}I", data, 6)
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero extent in dims {dims}", offset=6)
    count = int(np.prod(dims))
    expected = dims_end + 4 * count
    if len(data) != expected:
        raise TensorFormatError(
            f"payload length {len(data) - dims_end} != expected {4 * count}",
            offset=dims_end,
        )
    values = np.frombuffer(data, dtype="<f4", count=count, offset=dims_end)
    return values.astype(np.float64).reshape(dims)
