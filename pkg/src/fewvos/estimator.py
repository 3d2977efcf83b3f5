"""Scikit-learn style wrapper around the episode optimizer.

The segmenter is transductive: ``fit`` consumes the unlabelled query video
together with the labelled support set and learns one linear classifier
per frame; ``predict`` returns the masks of the fitted video.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .episodes import Episode, FeatureSequence, SupportSet
from .metrics import iou
from .optimizer import MODES, TTIConfig, run_episode
from .validation import as_float_array, check_binary_mask


class TransductiveVideoSegmenter(BaseEstimator):
    """Few-shot video object segmentation via per-frame linear classifiers.

    Parameters
    ----------
    mode : {"tti", "baseline", "naive"}
        ``tti`` runs the full two-stage procedure with the temporal
        consistency term and keyframe refinement; ``baseline`` disables
        both (independent per-frame fitting); ``naive`` shares a single
        classifier across frames and sums the per-frame losses.
    iterations, prior_update_iteration, learning_rate, temperature
        Stage-one gradient descent controls.
    refine_iterations, distance_fraction, positive_threshold
        Keyframe refinement controls (``tti`` mode only).

    Attributes
    ----------
    classifier_bank_ : ClassifierBank
        Fitted per-frame weights and biases.
    keyframe_ : int or None
        Index of the frame used for refinement.
    masks_ : ndarray of shape (n_frames, H, W)
    probabilities_ : ndarray of shape (n_frames, H, W)
    trace_ : OptimizationTrace
    """

    def __init__(
        self,
        mode: str = "tti",
        iterations: int = 50,
        prior_update_iteration: int = 10,
        learning_rate: float = 0.025,
        temperature: float = 20.0,
        refine_iterations: int = 20,
        distance_fraction: float = 0.25,
        positive_threshold: float = 0.8,
        binarize_threshold: float = 0.5,
        init_prediction_bias: float = 0.0,
        couple_prototype_gradient: bool = False,
        refine_keyframe_only: bool = False,
    ):
        self.mode = mode
        self.iterations = iterations
        self.prior_update_iteration = prior_update_iteration
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.refine_iterations = refine_iterations
        self.distance_fraction = distance_fraction
        self.positive_threshold = positive_threshold
        self.binarize_threshold = binarize_threshold
        self.init_prediction_bias = init_prediction_bias
        self.couple_prototype_gradient = couple_prototype_gradient
        self.refine_keyframe_only = refine_keyframe_only

    def _config(self) -> TTIConfig:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        return TTIConfig(
            iterations=self.iterations,
            prior_update_iteration=self.prior_update_iteration,
            learning_rate=self.learning_rate,
            temperature=self.temperature,
            refine_iterations=self.refine_iterations,
            distance_fraction=self.distance_fraction,
            positive_threshold=self.positive_threshold,
            binarize_threshold=self.binarize_threshold,
            mode=self.mode,
            init_prediction_bias=self.init_prediction_bias,
            couple_prototype_gradient=self.couple_prototype_gradient,
            refine_keyframe_only=self.refine_keyframe_only,
        )

    def fit(self, query_features, support_features, support_masks):
        """Learn per-frame classifiers for one episode.

        Parameters
        ----------
        query_features : array-like of shape (n_frames, C, H, W)
            Unlabelled video features (raw; normalization happens here).
        support_features : array-like of shape (n_shots, C, H, W)
        support_masks : array-like of shape (n_shots, H, W) with {0,1} entries
        """
        query = as_float_array(query_features, "query_features", ndim=4)
        support = as_float_array(support_features, "support_features", ndim=4)
        masks = np.stack(
            [check_binary_mask(m, f"support_masks[{i}]")
             for i, m in enumerate(np.asarray(support_masks))]
        )
        episode = Episode(
            support=SupportSet(support, masks),
            query=FeatureSequence(query),
            episode_id="estimator",
        )
        predicted, trace = run_episode(episode, self._config())
        self.masks_ = predicted
        self.probabilities_ = trace.probabilities_final
        self.classifier_bank_ = trace.bank
        self.keyframe_ = trace.keyframe
        self.trace_ = trace
        return self

    def _check_fitted(self):
        if not hasattr(self, "masks_"):
            raise NotFittedError("call fit before predict")

    def predict(self) -> np.ndarray:
        """Binary masks of the fitted query video, shape (n_frames, H, W)."""
        self._check_fitted()
        return self.masks_

    def predict_proba(self) -> np.ndarray:
        """Foreground probabilities of the fitted query video."""
        self._check_fitted()
        return self.probabilities_

    def score(self, gt_masks) -> float:
        """Mean IoU of the fitted masks against ground truth."""
        self._check_fitted()
        gt = np.asarray(gt_masks)
        return float(np.mean([iou(p, g) for p, g in zip(self.masks_, gt)]))
