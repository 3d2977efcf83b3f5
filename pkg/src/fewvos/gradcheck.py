"""Finite-difference verification of every analytic loss gradient.

For each loss a seeded random instance is built, the analytic gradient is
compared coordinate-wise against central differences of the loss value,
and the maximum relative error is reported.  Coordinates where both sides
are below ``SKIP_MAGNITUDE`` carry no signal and are skipped.  The dense
contrastive loss has no analytic gradient here; its vectorized value is
checked against a naive triple-loop evaluation instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .classifier import ClassifierBank
from .losses import (
    LossWeights,
    PredictionState,
    combined_loss,
    compute_signatures,
    dense_contrastive_loss,
    entropy_loss,
    global_prototype,
    kl_loss,
    label_marginal,
    query_states,
    support_cross_entropy,
    temporal_consistency_loss,
)
from .numerics import finite_difference_gradient, normalize_columns

SKIP_MAGNITUDE = 1e-8
TOLERANCE = 1e-4
DEFAULT_SIZE = (8, 6, 6, 4, 2)  # channels, height, width, frames, shots


class InstanceSize(NamedTuple):
    channels: int
    height: int
    width: int
    frames: int
    shots: int


@dataclass
class CheckResult:
    loss: str
    max_rel_error: float
    worst_coordinate: int
    worst_instance: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Coordinate-wise relative error; silent coordinates come back as 0."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(a), np.abs(n))
    silent = (np.abs(a) < SKIP_MAGNITUDE) & (np.abs(n) < SKIP_MAGNITUDE)
    return np.where(silent, 0.0, np.abs(a - n) / np.where(scale == 0, 1.0, scale))


@dataclass
class _Instance:
    """One random problem: features, labels, classifier bank, priors."""

    query: np.ndarray  # [N_v, C, H, W] normalized
    support: np.ndarray  # [K, C, H, W] normalized
    masks: np.ndarray  # [K, H, W]
    bank: ClassifierBank
    priors: np.ndarray  # [N_v, 2]
    weights: LossWeights


def _random_instance(rng: np.random.Generator, size: InstanceSize) -> _Instance:
    c, h, w, n, k = size
    query = normalize_columns(rng.standard_normal((n, c, h, w)))
    support = normalize_columns(rng.standard_normal((k, c, h, w)))
    masks = (rng.random((k, h, w)) < 0.4).astype(np.uint8)
    for i in range(k):  # imprinting and CE need at least one positive pixel
        if masks[i].sum() == 0:
            masks[i, rng.integers(h), rng.integers(w)] = 1
    # keep every logit inside +-logit(PROB_EPS): the CE gradient is exact
    # while the clamped value flattens outside, so differences only agree
    # in the smooth region (8.5 * |cos - bias| <= 15.3 < 16.1)
    temperature = float(rng.uniform(5.0, 8.5))
    bank = ClassifierBank(
        weights=rng.normal(scale=0.5, size=(n, c)),
        biases=rng.uniform(0.2, 0.8, size=n),
        temperature=temperature,
    )
    fractions = rng.uniform(0.2, 0.8, size=n)
    priors = np.stack([np.array([1.0 - f, f]) for f in fractions])
    weights = LossWeights(entropy=0.5, kl=1.5, consistency=0.5)
    return _Instance(query, support, masks, bank, priors, weights)


def _pack(bank: ClassifierBank) -> np.ndarray:
    return np.concatenate([bank.weights.ravel(), bank.biases])


def _unpack(params: np.ndarray, bank: ClassifierBank) -> ClassifierBank:
    n, c = bank.weights.shape
    return ClassifierBank(
        weights=params[: n * c].reshape(n, c).copy(),
        biases=params[n * c:].copy(),
        temperature=bank.temperature,
    )


def _stack_grads(dw: np.ndarray, db: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(dw).ravel(), np.atleast_1d(db)])


def _check_ce(inst: _Instance) -> tuple[np.ndarray, np.ndarray]:
    w0, b0 = inst.bank.weights[0], float(inst.bank.biases[0])
    tau = inst.bank.temperature

    def f(p: np.ndarray) -> float:
        value, _, _ = support_cross_entropy(
            inst.support, inst.masks, p[:-1], float(p[-1]), tau
        )
        return value

    _, dw, db = support_cross_entropy(inst.support, inst.masks, w0, b0, tau)
    p0 = np.concatenate([w0, [b0]])
    return _stack_grads(dw, db), finite_difference_gradient(f, p0)


def _frame_state(inst: _Instance, params: np.ndarray, t: int = 0) -> PredictionState:
    flat = inst.query[t].reshape(1, inst.query.shape[1], -1)
    return PredictionState(flat, params[:-1], float(params[-1]),
                           inst.bank.temperature)


def _check_entropy(inst: _Instance) -> tuple[np.ndarray, np.ndarray]:
    p0 = np.concatenate([inst.bank.weights[0], [inst.bank.biases[0]]])

    def f(p: np.ndarray) -> float:
        return entropy_loss(_frame_state(inst, p).probs)[0]

    state = _frame_state(inst, p0)
    _, dprobs = entropy_loss(state.probs)
    dw, db = state.backprop(dprobs)
    return _stack_grads(dw, db), finite_difference_gradient(f, p0)


def _check_kl(inst: _Instance) -> tuple[np.ndarray, np.ndarray]:
    p0 = np.concatenate([inst.bank.weights[0], [inst.bank.biases[0]]])
    prior = inst.priors[0]

    def f(p: np.ndarray) -> float:
        return kl_loss(label_marginal(_frame_state(inst, p).probs), prior)[0]

    state = _frame_state(inst, p0)
    _, dmarginal = kl_loss(label_marginal(state.probs), prior)
    dprobs = np.full(state.probs.shape,
                     (dmarginal[1] - dmarginal[0]) / state.probs.size)
    dw, db = state.backprop(dprobs)
    return _stack_grads(dw, db), finite_difference_gradient(f, p0)


def _consistency_sum(inst: _Instance, bank: ClassifierBank,
                     prototype: np.ndarray, couple: bool) -> float:
    states = query_states(inst.query, bank)
    sigs = [compute_signatures(s.features[0], s.probs) for s in states]
    proto = global_prototype(bank) if couple else prototype
    value, _, _ = temporal_consistency_loss(proto, sigs, states, couple)
    return value * bank.n_frames  # sum of per-frame terms


def _check_consistency(inst: _Instance, couple: bool = False
                       ) -> tuple[np.ndarray, np.ndarray]:
    prototype = global_prototype(inst.bank)
    states = query_states(inst.query, inst.bank)
    sigs = [compute_signatures(s.features[0], s.probs) for s in states]
    _, dw, db = temporal_consistency_loss(prototype, sigs, states, couple)

    def f(p: np.ndarray) -> float:
        return _consistency_sum(inst, _unpack(p, inst.bank), prototype, couple)

    return (
        np.concatenate([dw.ravel(), db]),
        finite_difference_gradient(f, _pack(inst.bank)),
    )


def _check_consistency_coupled(inst: _Instance) -> tuple[np.ndarray, np.ndarray]:
    return _check_consistency(inst, couple=True)


def _check_combined(inst: _Instance) -> tuple[np.ndarray, np.ndarray]:
    prototype = global_prototype(inst.bank)

    def f(p: np.ndarray) -> float:
        bank = _unpack(p, inst.bank)
        breakdown, _ = combined_loss(
            inst.support, inst.masks, inst.query, bank, inst.priors,
            inst.weights, prototype=prototype,
        )
        # Component values are frame means; the per-frame gradients are of
        # the summed per-frame objectives.
        return breakdown.total * bank.n_frames

    breakdown, _ = combined_loss(
        inst.support, inst.masks, inst.query, inst.bank, inst.priors,
        inst.weights, prototype=prototype,
    )
    analytic = np.concatenate(
        [breakdown.grad_weights.ravel(), breakdown.grad_biases]
    )
    return analytic, finite_difference_gradient(f, _pack(inst.bank))


def _check_dcl(inst: _Instance) -> tuple[np.ndarray, np.ndarray]:
    """Value check: vectorized dense contrastive loss vs a triple loop."""
    temperature = 0.5
    a, b = inst.query[0], inst.query[1 % inst.query.shape[0]]
    fast = dense_contrastive_loss(a, b, temperature)
    c = a.shape[0]
    fa = a.reshape(c, -1)
    fb = b.reshape(c, -1)
    total = 0.0
    for p in range(fa.shape[1]):
        sims = [float(fa[:, p] @ fb[:, q]) for q in range(fb.shape[1])]
        logits = [s / temperature for s in sims]
        best = max(logits)
        denom = sum(math.exp(l - best) for l in logits)
        total += -math.log(math.exp(0.0) / denom)
    slow = total / fa.shape[1]
    return np.array([fast]), np.array([slow])


LOSS_CHECKS: dict[str, Callable[[_Instance], tuple[np.ndarray, np.ndarray]]] = {
    "ce": _check_ce,
    "entropy": _check_entropy,
    "kl": _check_kl,
    "consistency": _check_consistency,
    "combined": _check_combined,
    "dcl": _check_dcl,
}


def run_gradient_checks(
    seed: int = 0,
    instances: int = 20,
    size: InstanceSize = InstanceSize(*DEFAULT_SIZE),
    checks: dict[str, Callable] | None = None,
) -> list[CheckResult]:
    """Run every registered check over seeded random instances."""
    if instances < 1:
        raise ValueError("need at least one instance")
    checks = dict(LOSS_CHECKS if checks is None else checks)
    results = []
    for name, check in checks.items():
        worst = 0.0
        worst_coord = -1
        worst_instance = -1
        for i in range(instances):
            rng = np.random.default_rng([seed, i])
            inst = _random_instance(rng, size)
            analytic, numeric = check(inst)
            errors = relative_errors(analytic, numeric)
            coord = int(np.argmax(errors))
            if errors[coord] > worst:
                worst = float(errors[coord])
                worst_coord = coord
                worst_instance = i
        results.append(CheckResult(name, worst, worst_coord, worst_instance))
    return results
