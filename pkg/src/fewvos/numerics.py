"""Elementary numeric kernels: normalization, cosine similarity, stable
sigmoid, exact Euclidean distance transform, and a central-difference
gradient checker.

All public functions take and return 64-bit float arrays.  Degenerate
normalization does not raise: a vector whose norm falls below ``NORM_EPS``
maps to the all-zero sentinel, and cosine similarity with a sentinel is 0.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import ndimage

from .errors import EmptyForegroundError

# Vectors with smaller L2 norm map to the zero sentinel.
NORM_EPS = 1e-12
# Probability clamp applied before any logarithm.
PROB_EPS = 1e-7

_TINY = np.nextafter(0.0, 1.0)
_ALMOST_ONE = np.nextafter(1.0, 0.0)


def normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit L2 norm.

    Near-zero input (norm < ``NORM_EPS``) maps to the all-zero sentinel
    rather than raising, because empty soft masks occur transiently during
    optimization and must not abort an episode.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalize an empty vector")
    n = float(np.linalg.norm(v))
    if n < NORM_EPS:
        return np.zeros_like(v)
    return v / n


def normalize_columns(features: np.ndarray, channel_axis: int = -3) -> np.ndarray:
    """Normalize every spatial column of a feature map to unit norm.

    ``features`` has a channel axis (default: third from the end, matching
    the ``[..., C, H, W]`` layout); each column across that axis becomes a
    unit vector or the zero sentinel.
    """
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=channel_axis, keepdims=True)
    safe = np.where(norms < NORM_EPS, 1.0, norms)
    out = f / safe
    return np.where(norms < NORM_EPS, 0.0, out)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Returns 0 if either vector is (near) zero.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError("cosine_similarity requires at least one element")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def sigmoid(x):
    """Numerically stable logistic function.

    Output is clipped to the open interval (0, 1): extreme negative inputs
    return the smallest positive double instead of underflowing to 0.
    """
    arr = np.asarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    e = np.exp(arr[~pos])
    out[~pos] = e / (1.0 + e)
    np.clip(out, _TINY, _ALMOST_ONE, out=out)
    if np.ndim(x) == 0:
        return float(out)
    return out


def clamp_probs(p: np.ndarray, eps: float = PROB_EPS) -> np.ndarray:
    """Clip probabilities into [eps, 1-eps] before taking logarithms."""
    return np.clip(p, eps, 1.0 - eps)


def distance_transform(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from every cell to the nearest positive pixel.

    Raises ``EmptyForegroundError`` on an all-zero mask; callers decide how
    to proceed (e.g. skip keyframe refinement).
    """
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    positive = m != 0
    if not positive.any():
        raise EmptyForegroundError("distance transform of an all-zero mask")
    return ndimage.distance_transform_edt(~positive).astype(np.float64)


def finite_difference_gradient(
    f: Callable[[np.ndarray], float],
    p: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Non-finite values of ``f`` propagate into the returned gradient.
    """
    p = np.asarray(p, dtype=np.float64)
    grad = np.zeros_like(p)
    flat = grad.ravel()
    base = p.ravel()
    for i in range(base.size):
        step = np.zeros_like(base)
        step[i] = h
        fp = f((base + step).reshape(p.shape))
        fm = f((base - step).reshape(p.shape))
        flat[i] = (fp - fm) / (2.0 * h)
    return grad
