"""Input validation helpers used by the estimator and the public ops."""

from __future__ import annotations

import numpy as np

from .numerics import NORM_EPS


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Convert to a finite float64 array, optionally enforcing a rank."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_binary_mask(mask, name: str = "mask", ndim: int = 2) -> np.ndarray:
    """Validate a {0,1}-valued mask and return it as uint8."""
    arr = np.asarray(mask)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError(f"{name} entries must be exactly 0 or 1")
    return arr.astype(np.uint8)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def check_normalized(features: np.ndarray, name: str = "features") -> None:
    """Every spatial column must be unit norm or the zero sentinel."""
    norms = np.linalg.norm(features, axis=-3)
    ok = (np.abs(norms - 1.0) <= 1e-9) | (norms < NORM_EPS)
    if not ok.all():
        raise ValueError(f"{name} are not normalized (call normalize_columns first)")
