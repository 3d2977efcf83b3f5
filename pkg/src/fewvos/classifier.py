"""Per-frame linear classifier: prototype imprinting, bias initialization,
and the cosine-sigmoid prediction rule.

A classifier scores pixel (x, y) of a normalized feature map F as

    sigmoid(temperature * (cos(F(:, x, y), weights) - bias))

so predictions depend only on feature direction, never magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySupportMaskError
from .numerics import NORM_EPS, sigmoid
from .validation import as_float_array


@dataclass
class BinaryMask:
    """A {0,1} label grid with an optional ignore mask.

    Ignored pixels are excluded from any loss; they are neither positive
    nor negative.
    """

    values: np.ndarray  # [H, W] uint8
    ignore: np.ndarray | None = None  # [H, W] bool

    def __post_init__(self):
        self.values = np.asarray(self.values).astype(np.uint8)
        if self.ignore is not None:
            self.ignore = np.asarray(self.ignore).astype(bool)
            if self.ignore.shape != self.values.shape:
                raise ValueError("ignore mask shape differs from label shape")
            if (self.ignore & (self.values != 0)).any():
                raise ValueError("ignore mask overlaps positive labels")

    @property
    def scored(self) -> np.ndarray:
        if self.ignore is None:
            return np.ones(self.values.shape, dtype=bool)
        return ~self.ignore


@dataclass
class FrameClassifier:
    """Linear classifier of one frame: weight direction, bias, temperature."""

    weights: np.ndarray  # [C]
    bias: float
    temperature: float = 20.0

    def __post_init__(self):
        self.weights = as_float_array(self.weights, "weights", ndim=1)
        self.bias = float(self.bias)
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class ClassifierBank:
    """Per-frame classifiers of one query video, updated jointly.

    All frames share the channel count and temperature; ``iteration``
    counts applied gradient steps.
    """

    weights: np.ndarray  # [N_v, C]
    biases: np.ndarray  # [N_v]
    temperature: float = 20.0
    iteration: int = 0

    def __post_init__(self):
        self.weights = as_float_array(self.weights, "weights", ndim=2)
        self.biases = as_float_array(self.biases, "biases", ndim=1)
        if self.weights.shape[0] != self.biases.shape[0]:
            raise ValueError("weights and biases disagree on frame count")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")

    @property
    def n_frames(self) -> int:
        return self.weights.shape[0]

    def frame(self, t: int) -> FrameClassifier:
        return FrameClassifier(self.weights[t].copy(), float(self.biases[t]), self.temperature)

    def copy(self) -> "ClassifierBank":
        return ClassifierBank(
            self.weights.copy(), self.biases.copy(), self.temperature, self.iteration
        )


def imprint_weights(support_features: np.ndarray, support_masks: np.ndarray) -> np.ndarray:
    """Initial weights: average over shots of the masked average-pooled
    normalized support features.

    The result is a convex combination of unit vectors, so its norm is at
    most 1.
    """
    feats = as_float_array(support_features, "support_features", ndim=4)
    masks = np.asarray(support_masks, dtype=np.float64)
    if masks.shape != (feats.shape[0],) + feats.shape[2:]:
        raise ValueError("support masks do not match support features spatially")
    pooled = []
    for k in range(feats.shape[0]):
        m = masks[k]
        total = m.sum()
        if total <= 0:
            raise EmptySupportMaskError(f"support mask {k} has no positive pixel")
        pooled.append((feats[k] * m[None]).sum(axis=(1, 2)) / total)
    return np.mean(pooled, axis=0)


def cosine_map(features: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Cosine similarity of every spatial column to ``weights``.

    ``features`` is ``[..., C, H, W]`` with unit (or sentinel) columns; the
    result drops the channel axis.  A degenerate weight vector yields zeros.
    """
    f = np.asarray(features, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if f.shape[-3] != w.shape[0]:
        raise ValueError(
            f"channel mismatch: features have {f.shape[-3]}, weights have {w.shape[0]}"
        )
    wn = float(np.linalg.norm(w))
    if wn < NORM_EPS:
        return np.zeros(f.shape[:-3] + f.shape[-2:])
    cos = np.tensordot(f, w / wn, axes=([-3], [0]))
    return np.clip(cos, -1.0, 1.0)


def predict(features: np.ndarray, clf: FrameClassifier) -> np.ndarray:
    """Foreground probability map of one frame under one classifier."""
    cos = cosine_map(features, clf.weights)
    return sigmoid(clf.temperature * (cos - clf.bias))


def initial_foreground(
    features: np.ndarray, weights: np.ndarray, temperature: float, bias: float = 0.0
) -> np.ndarray:
    """Foreground probabilities before any bias is known.

    The bias defaults to 0 here; the proper per-frame bias is then the mean
    of this map (``init_bias``), which breaks the circular definition of
    the initial prediction.
    """
    cos = cosine_map(features, weights)
    return sigmoid(temperature * (cos - bias))


def init_bias(initial_probs: np.ndarray) -> float:
    """Per-frame bias: mean of the initial foreground predictions."""
    p = np.asarray(initial_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty probability grid")
    return float(p.mean())


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Threshold a probability map; ties (== threshold) go to foreground."""
    return (np.asarray(probs) >= threshold).astype(np.uint8)
