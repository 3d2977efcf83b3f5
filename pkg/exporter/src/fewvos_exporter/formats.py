"""Writers for the interchange formats consumed by the segmentation library.

Both formats are implemented here independently, against their documented
layout, so this package needs nothing from the consumer at runtime.

FTS tensor file, little-endian:

    magic "FTS1" | dtype u8 (1 = float32) | ndim u8 | ndim x u32 dims |
    row-major float32 payload

Dataset manifest: JSON with ``format_version``, a ``videos`` list (id,
frame_count, features, masks, classes) and a ``folds`` mapping of
train/val/test class lists; paths are relative to the manifest file.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FTS1"
DTYPE_F32 = 1
MANIFEST_VERSION = 1


def write_tensor(array: np.ndarray, path: Path) -> None:
    """Write a tensor as FTS, atomically (write-temp-then-rename)."""
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.ndim == 0:
        raise ValueError("tensors must have at least one dimension")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to write non-finite values")
    blob = MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim)
    blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
    blob += arr.astype("<f4").tobytes()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(videos: list[dict], folds: dict, path: Path,
                   channels: int | None = None) -> None:
    doc = {
        "format_version": MANIFEST_VERSION,
        "videos": videos,
        "folds": folds,
    }
    if channels is not None:
        doc["channels"] = channels
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def nearest_resize(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample (pixel-centre convention, matching the
    consumer's mask handling)."""
    h, w = grid.shape
    out_h, out_w = size
    rows = np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int)
    cols = np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int)
    return grid[np.clip(rows, 0, h - 1)][:, np.clip(cols, 0, w - 1)]
