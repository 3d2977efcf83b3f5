"""Value and analytic gradient of every inference loss, and their weighted
combination.

Gradients are hand-derived by chaining through the sigmoid, the cosine
score, and (for the temporal term) the soft masked average pooling; the
finite-difference suite in :mod:`fewvos.gradcheck` is the single source of
truth for their correctness.

Conventions
-----------
* Component values in a :class:`LossBreakdown` are averaged over frames,
  so magnitudes do not grow with video length.
* Per-frame gradients are the derivatives of that frame's own update
  objective ``ce(t) + w1*entropy(t) + w2*kl(t) + w3*align(t)``, where
  ``align(t)`` is frame t's temporal alignment term and the video
  prototype is held constant for the iteration (stop-gradient).  This
  makes frames with ``w3 = 0`` evolve exactly as standalone one-frame
  videos.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .classifier import ClassifierBank
from .numerics import NORM_EPS, clamp_probs, sigmoid


class LossWeights(NamedTuple):
    """Multipliers of the entropy, marginal-KL and temporal terms."""

    entropy: float
    kl: float
    consistency: float


@dataclass
class Signatures:
    """Soft-pooled foreground/background feature of one frame.

    Each vector is a probability-weighted average of unit columns (norm at
    most 1) or the zero sentinel when the probability mass vanishes.
    """

    foreground: np.ndarray  # [C]
    background: np.ndarray  # [C]
    foreground_mass: float = 0.0
    background_mass: float = 0.0


@dataclass
class LossBreakdown:
    """All loss components of one iteration plus per-frame gradients."""

    ce: float
    entropy: float
    kl: float
    consistency: float
    total: float
    grad_weights: np.ndarray  # [N_v, C]
    grad_biases: np.ndarray  # [N_v]


class PredictionState:
    """Cosine scores and probabilities of one classifier on feature maps,
    with reverse-mode accumulation into (weights, bias).

    ``features`` is ``[M, C, P]`` (M maps, P flattened pixels).
    """

    def __init__(self, features: np.ndarray, weights: np.ndarray, bias: float,
                 temperature: float):
        self.features = features
        self.temperature = float(temperature)
        self.weight_norm = float(np.linalg.norm(weights))
        if self.weight_norm < NORM_EPS:
            self.unit_weights = np.zeros_like(weights)
            self.cos = np.zeros(features.shape[:1] + features.shape[2:])
        else:
            self.unit_weights = weights / self.weight_norm
            self.cos = np.clip(
                np.einsum("c,mcp->mp", self.unit_weights, features), -1.0, 1.0
            )
        self.probs = sigmoid(self.temperature * (self.cos - bias))

    def backprop(self, dprobs: np.ndarray) -> tuple[np.ndarray, float]:
        """Push dLoss/dprobs back to (dLoss/dweights, dLoss/dbias)."""
        return self.backprop_logits(dprobs * self.probs * (1.0 - self.probs))

    def backprop_logits(self, dlogits: np.ndarray) -> tuple[np.ndarray, float]:
        """Push dLoss/dlogit (logit = temperature * (cos - bias)) back to the
        parameters; used where the sigmoid derivative cancels analytically."""
        db = -self.temperature * float(dlogits.sum())
        if self.weight_norm < NORM_EPS:
            return np.zeros_like(self.unit_weights), db
        dcos = np.einsum("mp,mcp->c", dlogits, self.features)
        dcos -= float((dlogits * self.cos).sum()) * self.unit_weights
        dw = (self.temperature / self.weight_norm) * dcos
        return dw, db


def _flatten_maps(features: np.ndarray) -> np.ndarray:
    """[K?, C, H, W] -> [K, C, P] with a leading axis of at least 1."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 3:
        f = f[None]
    return f.reshape(f.shape[0], f.shape[1], -1)


def support_cross_entropy(
    support_features: np.ndarray,
    support_masks: np.ndarray,
    weights: np.ndarray,
    bias: float,
    temperature: float,
    ignore: np.ndarray | None = None,
) -> tuple[float, np.ndarray, float]:
    """Pixel-wise binary cross entropy of one classifier on the support set.

    Averaged over shots and over scored pixels; ignore-masked pixels are
    excluded and the per-shot pixel count shrinks accordingly.  The value
    clamps probabilities before the logs; the gradient is the exact
    logistic one (``sigma - label`` per logit), so saturated pixels keep a
    recovery signal even where the clamped value has flattened.  Returns
    ``(value, dweights, dbias)``.
    """
    feats = _flatten_maps(support_features)
    labels = np.asarray(support_masks, dtype=np.float64).reshape(feats.shape[0], -1)
    if ignore is None:
        scored = np.ones_like(labels, dtype=bool)
    else:
        scored = ~np.asarray(ignore, dtype=bool).reshape(labels.shape)
    state = PredictionState(feats, weights, bias, temperature)
    k = feats.shape[0]
    clamped = clamp_probs(state.probs)
    counts = scored.sum(axis=1).astype(np.float64)  # per shot
    per_pixel = -(labels * np.log(clamped) + (1.0 - labels) * np.log(1.0 - clamped))
    per_pixel = np.where(scored, per_pixel, 0.0)
    safe = np.where(counts > 0, counts, 1.0)
    value = float((per_pixel.sum(axis=1) / safe).sum() / k)
    dlogits = np.where(scored, state.probs - labels, 0.0) / (k * safe[:, None])
    dw, db = state.backprop_logits(dlogits)
    return value, dw, db


def entropy_loss(probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary entropy of a probability map and its gradient w.r.t. it.

    The gradient uses the clamped log-odds, keeping it bounded at
    saturated pixels (where the sigmoid factor vanishes anyway).
    """
    p = np.asarray(probs, dtype=np.float64)
    clamped = clamp_probs(p)
    value = float(-np.mean(clamped * np.log(clamped)
                           + (1.0 - clamped) * np.log(1.0 - clamped)))
    dprobs = -np.log(clamped / (1.0 - clamped)) / p.size
    return value, dprobs


def label_marginal(probs: np.ndarray) -> np.ndarray:
    """(background mass, foreground mass) of a probability map."""
    p = np.asarray(probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty probability grid")
    m = float(p.mean())
    return np.array([1.0 - m, m])


def kl_loss(marginal: np.ndarray, prior: np.ndarray) -> tuple[float, np.ndarray]:
    """KL divergence of the predicted label marginal from a prior.

    The prior is clamped away from {0, 1}.  Returns the value and the
    gradient with respect to the marginal.
    """
    p = np.asarray(marginal, dtype=np.float64)
    q = clamp_probs(np.asarray(prior, dtype=np.float64))
    ratio = np.log(np.maximum(p, np.finfo(np.float64).tiny) / q)
    value = float(np.sum(np.where(p > 0, p * ratio, 0.0)))
    return value, ratio + 1.0


def compute_signatures(features: np.ndarray, probs: np.ndarray) -> Signatures:
    """Soft masked average pooling of one frame's normalized features.

    Foreground pools with the probability map, background with its
    complement; a vanishing mass yields the zero sentinel.
    """
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(f.shape[0], -1)  # [C, P]
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    masses = (float(p.sum()), float((1.0 - p).sum()))
    vectors = []
    for weights_1d, mass in zip((p, 1.0 - p), masses):
        if mass < NORM_EPS:
            vectors.append(np.zeros(f.shape[0]))
        else:
            vectors.append(f @ weights_1d / mass)
    return Signatures(vectors[0], vectors[1], masses[0], masses[1])


def global_prototype(bank: ClassifierBank) -> np.ndarray:
    """Video-level prototype: mean of the per-frame weight vectors."""
    return bank.weights.mean(axis=0)


def _dcos_dvec(reference: np.ndarray, vec: np.ndarray) -> tuple[float, np.ndarray]:
    """cos(reference, vec) and its gradient w.r.t. ``vec``.

    Degenerate inputs give (0, zero gradient).
    """
    rn = float(np.linalg.norm(reference))
    vn = float(np.linalg.norm(vec))
    if rn < NORM_EPS or vn < NORM_EPS:
        return 0.0, np.zeros_like(vec)
    r_hat = reference / rn
    v_hat = vec / vn
    c = float(np.clip(np.dot(r_hat, v_hat), -1.0, 1.0))
    return c, (r_hat - c * v_hat) / vn


def frame_alignment_term(
    prototype: np.ndarray,
    signatures: Signatures,
    state: PredictionState,
) -> tuple[float, np.ndarray, float]:
    """One frame's temporal alignment term and its parameter gradient.

    The term is ``1 - cos(prototype, z_fg) + max(0, cos(prototype, z_bg))``
    with the prototype treated as a constant; gradients flow through the
    signatures via the probability map.  A sentinel signature contributes
    its worst-case constant (1 for foreground, 0 for background) with zero
    gradient.
    """
    f = state.features[0]  # [C, P]
    dprobs = np.zeros(state.probs.shape)
    c_fg, g_fg = _dcos_dvec(prototype, signatures.foreground)
    value = 1.0 - c_fg
    if signatures.foreground_mass >= NORM_EPS and np.any(g_fg):
        # z_fg = f @ p / mass; d z_fg / d p_i = (f_i - z_fg) / mass
        contrib = (g_fg @ f - g_fg @ signatures.foreground) / signatures.foreground_mass
        dprobs -= contrib.reshape(dprobs.shape)
    c_bg, g_bg = _dcos_dvec(prototype, signatures.background)
    if c_bg > 0.0:
        value += c_bg
        if signatures.background_mass >= NORM_EPS:
            contrib = (g_bg @ f - g_bg @ signatures.background) / signatures.background_mass
            dprobs -= contrib.reshape(dprobs.shape)  # d weight_i / d p_i = -1
    dw, db = state.backprop(dprobs)
    return value, dw, db


def temporal_consistency_loss(
    prototype: np.ndarray,
    signatures: Sequence[Signatures],
    states: Sequence[PredictionState],
    couple_prototype: bool = False,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Video-level alignment loss and per-frame parameter gradients.

    The value averages the per-frame alignment terms.  Returned gradients
    are of each frame's own term (not of the average), matching the
    per-frame update convention; with ``couple_prototype`` the prototype is
    differentiated through as the mean of the frame weights and the
    gradients become those of the summed terms.
    """
    n = len(states)
    grad_w = np.zeros((n, states[0].features.shape[1]))
    grad_b = np.zeros(n)
    terms = []
    for t, (sig, state) in enumerate(zip(signatures, states)):
        value_t, dw, db = frame_alignment_term(prototype, sig, state)
        terms.append(value_t)
        grad_w[t] = dw
        grad_b[t] = db
    if couple_prototype:
        # d(sum_t term_t)/d prototype, then d prototype / d w_t = I / N.
        dproto = np.zeros_like(prototype)
        for sig in signatures:
            c_fg, g = _dcos_dvec(sig.foreground, prototype)
            dproto -= g
            c_bg, g = _dcos_dvec(sig.background, prototype)
            if c_bg > 0.0:
                dproto += g
        grad_w += dproto[None, :] / n
    return float(np.mean(terms)), grad_w, grad_b


def dense_contrastive_loss(
    features_a: np.ndarray, features_b: np.ndarray, temperature: float
) -> float:
    """Dense InfoNCE between two normalized feature maps.

    Every position of the first map is an anchor; its positive is the most
    cosine-similar position of the second map (which may coincide with the
    anchor's own coordinates), and all positions of the second map are the
    candidate set.
    """
    if temperature <= 0:
        raise ValueError("contrastive temperature must be positive")
    a = _flatten_maps(features_a)[0]
    b = _flatten_maps(features_b)[0]
    if a.shape != b.shape:
        raise ValueError(f"feature shape mismatch: {a.shape} vs {b.shape}")
    logits = (a.T @ b) / temperature  # [P, P]
    per_anchor = logsumexp(logits, axis=1) - logits.max(axis=1)
    return float(per_anchor.mean())


def query_states(features: np.ndarray, bank: ClassifierBank) -> list[PredictionState]:
    """One PredictionState per query frame under the current bank."""
    flat = _flatten_maps(features)  # [N_v, C, P]
    return [
        PredictionState(flat[t][None], bank.weights[t], float(bank.biases[t]),
                        bank.temperature)
        for t in range(bank.n_frames)
    ]


def combined_loss(
    support_features: np.ndarray,
    support_masks: np.ndarray,
    query_features: np.ndarray,
    bank: ClassifierBank,
    priors: np.ndarray,
    weights: LossWeights,
    support_ignore: np.ndarray | None = None,
    states: Sequence[PredictionState] | None = None,
    prototype: np.ndarray | None = None,
    couple_prototype: bool = False,
) -> tuple[LossBreakdown, np.ndarray]:
    """Full inference loss of one iteration.

    Support CE, entropy and marginal KL are evaluated per frame and
    averaged for reporting; the temporal term is computed only when its
    weight is non-zero (otherwise reported as 0).  ``priors`` is the
    per-frame label-marginal prior ``[N_v, 2]``.  Returns the breakdown and
    the per-frame probability maps ``[N_v, P]``.
    """
    n = bank.n_frames
    if states is None:
        states = query_states(query_features, bank)
    grad_w = np.zeros_like(bank.weights)
    grad_b = np.zeros(n)
    ce_terms, ent_terms, kl_terms = [], [], []
    for t, state in enumerate(states):
        ce, dw, db = support_cross_entropy(
            support_features, support_masks,
            bank.weights[t], float(bank.biases[t]), bank.temperature,
            ignore=support_ignore,
        )
        ce_terms.append(ce)
        grad_w[t] += dw
        grad_b[t] += db

        ent, dprobs = entropy_loss(state.probs)
        ent_terms.append(ent)
        dw, db = state.backprop(weights.entropy * dprobs)
        grad_w[t] += dw
        grad_b[t] += db

        marginal = label_marginal(state.probs)
        kl, dmarginal = kl_loss(marginal, priors[t])
        kl_terms.append(kl)
        # d marginal / d p_i = (-1/P, +1/P)
        dprobs = np.full(state.probs.shape,
                         (dmarginal[1] - dmarginal[0]) / state.probs.size)
        dw, db = state.backprop(weights.kl * dprobs)
        grad_w[t] += dw
        grad_b[t] += db

    consistency = 0.0
    if weights.consistency != 0.0:
        if prototype is None:
            prototype = global_prototype(bank)
        sigs = [
            compute_signatures(state.features[0], state.probs) for state in states
        ]
        consistency, dw_all, db_all = temporal_consistency_loss(
            prototype, sigs, states, couple_prototype=couple_prototype
        )
        grad_w += weights.consistency * dw_all
        grad_b += weights.consistency * db_all

    ce = float(np.mean(ce_terms))
    entropy = float(np.mean(ent_terms))
    kl = float(np.mean(kl_terms))
    total = (ce + weights.entropy * entropy + weights.kl * kl
             + weights.consistency * consistency)
    breakdown = LossBreakdown(ce, entropy, kl, consistency, total, grad_w, grad_b)
    probs = np.stack([state.probs[0] for state in states])
    return breakdown, probs
