"""Two-stage transductive optimization of the per-frame classifiers.

Stage one imprints a shared initial weight vector, then runs plain
gradient descent on the combined loss with a fixed weight schedule: the
temporal term switches on and the marginal prior is refreshed once the
region-proportion estimate has settled.  Stage two selects the keyframe
(the frame whose foreground signature best matches the video prototype),
builds distance-transform pseudo-labels from its prediction, and refines
every frame's classifier with a cross-entropy loss on the keyframe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .classifier import (
    BinaryMask,
    ClassifierBank,
    binarize,
    imprint_weights,
    init_bias,
    initial_foreground,
)
from .errors import (
    EmptyForegroundError,
    NoKeyframeError,
    NonFiniteLossError,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    PredictionState,
    Signatures,
    combined_loss,
    compute_signatures,
    entropy_loss,
    global_prototype,
    kl_loss,
    label_marginal,
    query_states,
    support_cross_entropy,
)
from .numerics import cosine_similarity, distance_transform

MODES = ("tti", "baseline", "naive")


@dataclass
class TTIConfig:
    """All knobs of the inference procedure.

    Defaults follow the single-image transductive convention; every value
    is config-exposed and recorded in run outputs.
    """

    iterations: int = 50  # total stage-one iterations
    prior_update_iteration: int = 10  # when the marginal prior is refreshed
    learning_rate: float = 0.025
    temperature: float = 20.0
    contrast_temperature: float = 0.1
    refine_iterations: int = 20  # stage-two iterations
    distance_fraction: float = 0.25  # negative-pixel threshold, fraction of diagonal
    positive_threshold: float = 0.8
    binarize_threshold: float = 0.5
    mode: str = "tti"
    init_prediction_bias: float = 0.0  # bias of the pre-initialization prediction pass
    couple_prototype_gradient: bool = False
    refine_keyframe_only: bool = False  # refine only the keyframe, then broadcast

    def validate(self) -> None:
        if not 0 < self.prior_update_iteration < self.iterations:
            raise ValueError(
                "prior_update_iteration must satisfy 0 < prior_update_iteration"
                f" < iterations, got {self.prior_update_iteration} vs"
                f" {self.iterations}"
            )
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.distance_fraction < 1:
            raise ValueError("distance_fraction must lie in (0, 1)")
        if not 0.5 <= self.positive_threshold < 1:
            raise ValueError("positive_threshold must lie in [0.5, 1)")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.refine_iterations < 0:
            raise ValueError("refine_iterations must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class IterationRecord:
    """Loss values, weights in effect, and barrier data of one iteration."""

    iteration: int
    stage: int
    loss_weights: LossWeights
    ce: float
    entropy: float
    kl: float
    consistency: float
    total: float
    prototype: np.ndarray | None = None  # prototype used this iteration
    entering_weights_mean: np.ndarray | None = None  # mean of weights entering it


@dataclass
class OptimizationTrace:
    """Everything a diagnostic needs to replay one episode's optimization."""

    records: list[IterationRecord] = field(default_factory=list)
    bank: ClassifierBank | None = None
    keyframe: int | None = None
    refinement_skipped: str | None = None
    probabilities_stage1: np.ndarray | None = None  # [N_v, H, W]
    probabilities_final: np.ndarray | None = None  # [N_v, H, W]


def loss_weight_schedule(
    iteration: int, shots: int, prior_update_iteration: int
) -> LossWeights:
    """Loss weights before and after the prior-update iteration.

    Before: (1/K, 1/K, 0).  From the prior update on, the temporal weight
    becomes 1/K and the marginal weight is increased by 1.
    """
    if iteration < 1:
        raise ValueError("iterations are 1-based")
    base = 1.0 / shots
    if iteration < prior_update_iteration:
        return LossWeights(entropy=base, kl=base, consistency=0.0)
    return LossWeights(entropy=base, kl=base + 1.0, consistency=base)


def _check_finite(breakdown: LossBreakdown, iteration: int) -> None:
    values = (breakdown.ce, breakdown.entropy, breakdown.kl,
              breakdown.consistency, breakdown.total)
    if not all(math.isfinite(v) for v in values) or not (
        np.isfinite(breakdown.grad_weights).all()
        and np.isfinite(breakdown.grad_biases).all()
    ):
        raise NonFiniteLossError(
            f"non-finite loss or gradient at iteration {iteration}: "
            f"ce={breakdown.ce} entropy={breakdown.entropy} kl={breakdown.kl} "
            f"consistency={breakdown.consistency}"
        )


def _initial_bank(
    query_features: np.ndarray,
    support_features: np.ndarray,
    support_masks: np.ndarray,
    cfg: TTIConfig,
) -> tuple[ClassifierBank, np.ndarray]:
    """Imprinted weights shared across frames, per-frame biases, priors."""
    n_frames = query_features.shape[0]
    w0 = imprint_weights(support_features, support_masks)
    biases = np.empty(n_frames)
    for t in range(n_frames):
        p0 = initial_foreground(
            query_features[t], w0, cfg.temperature, cfg.init_prediction_bias
        )
        biases[t] = init_bias(p0)
    bank = ClassifierBank(
        weights=np.tile(w0, (n_frames, 1)),
        biases=biases,
        temperature=cfg.temperature,
    )
    states = query_states(query_features, bank)
    priors = np.stack([label_marginal(s.probs) for s in states])
    return bank, priors


def tti_stage1(
    query_features: np.ndarray,
    support_features: np.ndarray,
    support_masks: np.ndarray,
    cfg: TTIConfig,
) -> tuple[ClassifierBank, OptimizationTrace]:
    """Stage one: jointly descend all per-frame classifiers.

    ``query_features`` is ``[N_v, C, H, W]`` and must be normalized, as
    must the support features.  Baseline mode forces the temporal weight
    to zero but keeps the schedule's prior refresh and marginal bump.
    """
    cfg.validate()
    shots = support_features.shape[0]
    bank, priors = _initial_bank(query_features, support_features, support_masks, cfg)
    trace = OptimizationTrace()
    for iteration in range(1, cfg.iterations + 1):
        states = query_states(query_features, bank)
        if iteration == cfg.prior_update_iteration:
            priors = np.stack([label_marginal(s.probs) for s in states])
        weights = loss_weight_schedule(iteration, shots, cfg.prior_update_iteration)
        if cfg.mode == "baseline":
            weights = weights._replace(consistency=0.0)
        entering_mean = bank.weights.mean(axis=0)
        prototype = entering_mean if weights.consistency != 0.0 else None
        breakdown, _ = combined_loss(
            support_features,
            support_masks,
            query_features,
            bank,
            priors,
            weights,
            states=states,
            prototype=prototype,
            couple_prototype=cfg.couple_prototype_gradient,
        )
        _check_finite(breakdown, iteration)
        trace.records.append(
            IterationRecord(
                iteration=iteration,
                stage=1,
                loss_weights=weights,
                ce=breakdown.ce,
                entropy=breakdown.entropy,
                kl=breakdown.kl,
                consistency=breakdown.consistency,
                total=breakdown.total,
                prototype=None if prototype is None else prototype.copy(),
                entering_weights_mean=entering_mean.copy(),
            )
        )
        bank.weights = bank.weights - cfg.learning_rate * breakdown.grad_weights
        bank.biases = bank.biases - cfg.learning_rate * breakdown.grad_biases
        bank.iteration += 1
    trace.bank = bank
    spatial = query_features.shape[2:]
    states = query_states(query_features, bank)
    trace.probabilities_stage1 = np.stack(
        [s.probs[0].reshape(spatial) for s in states]
    )
    return bank, trace


def select_keyframe(bank: ClassifierBank, signatures: list[Signatures]) -> int:
    """Frame whose foreground signature best matches the video prototype.

    Ties break toward the smallest index.  If every signature is the zero
    sentinel there is nothing to compare and ``NoKeyframeError`` is raised.
    """
    if not signatures:
        raise ValueError("no signatures given")
    prototype = global_prototype(bank)
    if all(np.linalg.norm(s.foreground) == 0.0 for s in signatures):
        raise NoKeyframeError("all foreground signatures are zero sentinels")
    scores = [
        cosine_similarity(s.foreground, prototype)
        if np.linalg.norm(s.foreground) > 0 else -np.inf
        for s in signatures
    ]
    return int(np.argmax(scores))


def build_pseudo_labels(
    probs: np.ndarray, distance_fraction: float, positive_threshold: float
) -> BinaryMask:
    """Keyframe pseudo-labels from its probability map.

    Confident pixels become positives; pixels farther from the positive
    set than ``distance_fraction`` of the image diagonal become negatives;
    everything in between is ignored.
    """
    p = np.asarray(probs, dtype=np.float64)
    positive = p >= positive_threshold
    if not positive.any():
        raise EmptyForegroundError(
            f"no pixel reaches the confidence threshold {positive_threshold}"
        )
    distances = distance_transform(positive.astype(np.uint8))
    h, w = p.shape
    cutoff = distance_fraction * math.hypot(h, w)
    negative = distances > cutoff
    ignore = ~(positive | negative)
    return BinaryMask(values=positive.astype(np.uint8), ignore=ignore)


def tti_stage2(
    bank: ClassifierBank,
    keyframe_features: np.ndarray,
    pseudo_labels: BinaryMask,
    cfg: TTIConfig,
    trace: OptimizationTrace | None = None,
) -> ClassifierBank:
    """Stage two: refine classifiers on the keyframe's pseudo-labels.

    Each frame's classifier descends a cross entropy evaluated on the
    keyframe's features (pseudo-labels are only valid on that image); with
    ``refine_keyframe_only`` just the keyframe's classifier is refined and
    then broadcast to all frames.
    """
    bank = bank.copy()
    feats = keyframe_features[None]  # [1, C, H, W]
    labels = pseudo_labels.values[None]
    ignore = None if pseudo_labels.ignore is None else pseudo_labels.ignore[None]
    frames = (
        [trace.keyframe] if cfg.refine_keyframe_only and trace is not None
        else range(bank.n_frames)
    )
    for step in range(1, cfg.refine_iterations + 1):
        values = []
        for t in frames:
            ce, dw, db = support_cross_entropy(
                feats, labels, bank.weights[t], float(bank.biases[t]),
                bank.temperature, ignore=ignore,
            )
            if not math.isfinite(ce):
                raise NonFiniteLossError(f"non-finite refinement CE at step {step}")
            values.append(ce)
            bank.weights[t] = bank.weights[t] - cfg.learning_rate * dw
            bank.biases[t] = bank.biases[t] - cfg.learning_rate * db
        bank.iteration += 1
        if trace is not None:
            mean_ce = float(np.mean(values))
            trace.records.append(
                IterationRecord(
                    iteration=cfg.iterations + step,
                    stage=2,
                    loss_weights=LossWeights(0.0, 0.0, 0.0),
                    ce=mean_ce,
                    entropy=0.0,
                    kl=0.0,
                    consistency=0.0,
                    total=mean_ce,
                )
            )
    if cfg.refine_keyframe_only and trace is not None and cfg.refine_iterations > 0:
        key = trace.keyframe
        bank.weights = np.tile(bank.weights[key], (bank.n_frames, 1))
        bank.biases = np.full(bank.n_frames, float(bank.biases[key]))
    return bank


def _naive_stage(
    query_features: np.ndarray,
    support_features: np.ndarray,
    support_masks: np.ndarray,
    cfg: TTIConfig,
) -> tuple[ClassifierBank, OptimizationTrace]:
    """Shared-weights ablation: one classifier, per-frame losses summed.

    The marginal KL keeps its per-frame priors, which is exactly what
    degrades this mode when region proportions vary across frames.
    """
    n_frames = query_features.shape[0]
    shots = support_features.shape[0]
    w0 = imprint_weights(support_features, support_masks)
    p0 = initial_foreground(
        query_features, w0, cfg.temperature, cfg.init_prediction_bias
    )
    shared = ClassifierBank(
        weights=w0[None], biases=np.array([init_bias(p0)]),
        temperature=cfg.temperature,
    )
    flat = query_features.reshape(n_frames, query_features.shape[1], -1)
    trace = OptimizationTrace()

    def frame_states(b: ClassifierBank) -> list[PredictionState]:
        return [
            PredictionState(flat[t][None], b.weights[0], float(b.biases[0]),
                            b.temperature)
            for t in range(n_frames)
        ]

    priors = np.stack([label_marginal(s.probs) for s in frame_states(shared)])
    for iteration in range(1, cfg.iterations + 1):
        states = frame_states(shared)
        if iteration == cfg.prior_update_iteration:
            priors = np.stack([label_marginal(s.probs) for s in states])
        weights = loss_weight_schedule(iteration, shots, cfg.prior_update_iteration)
        weights = weights._replace(consistency=0.0)
        # the support CE term is identical for every frame of the sum
        ce, dw_ce, db_ce = support_cross_entropy(
            support_features, support_masks,
            shared.weights[0], float(shared.biases[0]), shared.temperature,
        )
        dw = n_frames * dw_ce
        db = n_frames * db_ce
        ce_sum = n_frames * ce
        ent_sum = kl_sum = 0.0
        for t, state in enumerate(states):
            ent, dp_ent = entropy_loss(state.probs)
            kl, dmarg = kl_loss(label_marginal(state.probs), priors[t])
            dp = weights.entropy * dp_ent + np.full(
                state.probs.shape, weights.kl * (dmarg[1] - dmarg[0]) / state.probs.size
            )
            dw_q, db_q = state.backprop(dp)
            dw += dw_q
            db += db_q
            ent_sum += ent
            kl_sum += kl
        total = ce_sum + weights.entropy * ent_sum + weights.kl * kl_sum
        if not math.isfinite(total):
            raise NonFiniteLossError(f"non-finite naive loss at iteration {iteration}")
        trace.records.append(
            IterationRecord(
                iteration=iteration, stage=1, loss_weights=weights,
                ce=ce_sum, entropy=ent_sum, kl=kl_sum, consistency=0.0, total=total,
            )
        )
        shared.weights = shared.weights - cfg.learning_rate * dw
        shared.biases = shared.biases - cfg.learning_rate * db
        shared.iteration += 1
    bank = ClassifierBank(
        weights=np.tile(shared.weights[0], (n_frames, 1)),
        biases=np.full(n_frames, float(shared.biases[0])),
        temperature=cfg.temperature,
        iteration=shared.iteration,
    )
    trace.bank = bank
    spatial = query_features.shape[2:]
    trace.probabilities_stage1 = np.stack(
        [s.probs[0].reshape(spatial) for s in query_states(query_features, bank)]
    )
    return bank, trace


def run_episode(episode, cfg: TTIConfig) -> tuple[np.ndarray, OptimizationTrace]:
    """End-to-end inference on one episode.

    Normalizes features, runs stage one (per mode), applies keyframe
    refinement in ``tti`` mode, and binarizes the final probability maps.
    Returns ``(masks [N_v, H, W] uint8, trace)``.
    """
    cfg.validate()
    ep = episode.normalized()
    query = ep.query.values
    support_feats = ep.support.features
    support_masks = ep.support.masks
    if cfg.mode == "naive":
        bank, trace = _naive_stage(query, support_feats, support_masks, cfg)
    else:
        bank, trace = tti_stage1(query, support_feats, support_masks, cfg)
    if cfg.mode == "tti":
        sigs = [
            compute_signatures(query[t], trace.probabilities_stage1[t])
            for t in range(bank.n_frames)
        ]
        try:
            trace.keyframe = select_keyframe(bank, sigs)
            pseudo = build_pseudo_labels(
                trace.probabilities_stage1[trace.keyframe],
                cfg.distance_fraction,
                cfg.positive_threshold,
            )
            bank = tti_stage2(bank, query[trace.keyframe], pseudo, cfg, trace)
            trace.bank = bank
        except (NoKeyframeError, EmptyForegroundError) as exc:
            trace.refinement_skipped = str(exc)
    spatial = query.shape[2:]
    states = query_states(query, bank)
    trace.probabilities_final = np.stack(
        [s.probs[0].reshape(spatial) for s in states]
    )
    masks = np.stack(
        [binarize(p, cfg.binarize_threshold) for p in trace.probabilities_final]
    )
    return masks, trace
