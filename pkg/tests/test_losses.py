import math

import numpy as np
import pytest

from fewvos.classifier import ClassifierBank, FrameClassifier, predict
from fewvos.losses import (
    LossWeights,
    PredictionState,
    Signatures,
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
from fewvos.numerics import PROB_EPS, normalize, normalize_columns

from conftest import random_normalized_features, random_support

LN2 = math.log(2.0)


def make_state(features, weights, bias, temperature=10.0):
    flat = features.reshape(1, features.shape[0], -1)
    return PredictionState(flat, np.asarray(weights, float), bias, temperature)


class TestSupportCrossEntropy:
    def test_confident_prediction_near_zero(self):
        w = normalize(np.array([1.0, 2.0, -0.5]))
        feats = np.empty((1, 3, 2, 2))
        masks = np.array([[[1, 0], [0, 1]]], dtype=np.uint8)
        for r in range(2):
            for c in range(2):
                feats[0, :, r, c] = w if masks[0, r, c] else -w
        value, _, _ = support_cross_entropy(feats, masks, w, 0.0, temperature=20.0)
        assert value < 1e-6

    def test_uniform_half_gives_ln2(self):
        feats = np.zeros((2, 4, 3, 3))  # sentinel columns: cosine 0 everywhere
        masks = np.zeros((2, 3, 3), dtype=np.uint8)
        masks[:, 1, 1] = 1
        value, _, _ = support_cross_entropy(feats, masks, np.ones(4), 0.0, 20.0)
        assert value == pytest.approx(LN2, abs=1e-9)

    def test_matches_naive_loop(self, rng):
        feats, masks = random_support(rng, 2, 5, 4, 4)
        w = rng.standard_normal(5)
        b, tau = 0.4, 8.0
        value, _, _ = support_cross_entropy(feats, masks, w, b, tau)
        w_unit = normalize(w)
        total = 0.0
        for k in range(2):
            shot = 0.0
            for r in range(4):
                for c in range(4):
                    cos = float(feats[k, :, r, c] @ w_unit)
                    sigma = 1.0 / (1.0 + math.exp(-tau * (cos - b)))
                    sigma = min(max(sigma, PROB_EPS), 1.0 - PROB_EPS)
                    if masks[k, r, c]:
                        shot -= math.log(sigma)
                    else:
                        shot -= math.log(1.0 - sigma)
            total += shot / 16.0
        assert value == pytest.approx(total / 2.0, abs=1e-12)

    def test_ignore_mask_shrinks_the_denominator(self, rng):
        feats, masks = random_support(rng, 1, 4, 3, 3)
        ignore = np.zeros((1, 3, 3), dtype=bool)
        ignore[0, 0, :] = True
        masks[0][ignore[0]] = 0
        w = rng.standard_normal(4)
        full, _, _ = support_cross_entropy(feats, masks, w, 0.2, 10.0)
        partial, _, _ = support_cross_entropy(feats, masks, w, 0.2, 10.0, ignore=ignore)
        w_unit = normalize(w)
        expected = 0.0
        for r in range(3):
            for c in range(3):
                if ignore[0, r, c]:
                    continue
                cos = float(feats[0, :, r, c] @ w_unit)
                sigma = 1.0 / (1.0 + math.exp(-10.0 * (cos - 0.2)))
                expected -= (
                    math.log(sigma) if masks[0, r, c] else math.log(1.0 - sigma)
                )
        assert partial == pytest.approx(expected / 6.0, abs=1e-12)
        assert partial != pytest.approx(full, abs=1e-6)

    def test_nonnegative_on_random_instances(self):
        for seed in range(20):
            local = np.random.default_rng(seed)
            feats, masks = random_support(local, 2, 5, 4, 4)
            value, _, _ = support_cross_entropy(
                feats, masks, local.standard_normal(5), local.uniform(0, 1), 12.0
            )
            assert value >= 0.0

    def test_all_ignored_shot_contributes_zero(self, rng):
        feats, masks = random_support(rng, 1, 4, 3, 3)
        masks[:] = 0
        ignore = np.ones((1, 3, 3), dtype=bool)
        value, dw, db = support_cross_entropy(
            feats, masks, rng.standard_normal(4), 0.1, 10.0, ignore=ignore
        )
        assert value == 0.0
        assert (dw == 0.0).all() and db == 0.0


class TestEntropy:
    def test_uniform_half_is_ln2(self):
        value, _ = entropy_loss(np.full((4, 4), 0.5))
        assert value == pytest.approx(LN2, abs=1e-9)

    def test_confident_is_tiny(self):
        value, _ = entropy_loss(np.full((4, 4), 1.0 - PROB_EPS))
        assert value < 1e-5

    def test_matches_loop_oracle(self, rng):
        probs = rng.uniform(0.05, 0.95, size=(5, 5))
        value, _ = entropy_loss(probs)
        total = 0.0
        for p in probs.ravel():
            total -= p * math.log(p) + (1 - p) * math.log(1 - p)
        assert value == pytest.approx(total / 25.0, abs=1e-12)

    def test_range(self, rng):
        value, _ = entropy_loss(rng.uniform(0.01, 0.99, size=(6, 6)))
        assert 0.0 <= value <= LN2 + 1e-12


class TestLabelMarginalAndKL:
    def test_quarter(self):
        np.testing.assert_allclose(
            label_marginal(np.full((2, 2), 0.25)), [0.75, 0.25]
        )

    def test_half(self):
        np.testing.assert_allclose(label_marginal(np.full((3, 3), 0.5)), [0.5, 0.5])

    def test_matches_loop(self, rng):
        probs = rng.random((6, 6))
        marginal = label_marginal(probs)
        mean = sum(probs.ravel()) / 36.0
        assert marginal[1] == pytest.approx(mean, abs=1e-12)
        assert marginal.sum() == pytest.approx(1.0, abs=1e-9)
        assert (marginal >= 0).all()

    def test_kl_zero_at_equal(self):
        p = np.array([0.3, 0.7])
        value, _ = kl_loss(p, p)
        assert value == 0.0

    def test_kl_limit_case(self):
        value, _ = kl_loss(
            np.array([1.0 - PROB_EPS, PROB_EPS]), np.array([0.5, 0.5])
        )
        assert value == pytest.approx(LN2, abs=1e-5)

    def test_kl_nonnegative_random(self, rng):
        for _ in range(20):
            a = rng.random()
            b = rng.random()
            value, _ = kl_loss(np.array([1 - a, a]), np.array([1 - b, b]))
            assert value >= 0.0

    def test_kl_matches_direct_formula(self, rng):
        p = np.array([0.2, 0.8])
        q = np.array([0.6, 0.4])
        value, _ = kl_loss(p, q)
        expected = 0.2 * math.log(0.2 / 0.6) + 0.8 * math.log(0.8 / 0.4)
        assert value == pytest.approx(expected, abs=1e-12)


class TestSignatures:
    def test_hard_foreground(self, rng):
        feats = random_normalized_features(rng, (5, 3, 3))
        sig = compute_signatures(feats, np.ones((3, 3)))
        np.testing.assert_allclose(sig.foreground, feats.mean(axis=(1, 2)), atol=1e-12)
        assert (sig.background == 0.0).all()

    def test_symmetric_weighting(self, rng):
        feats = random_normalized_features(rng, (5, 3, 3))
        sig = compute_signatures(feats, np.full((3, 3), 0.5))
        mean = feats.mean(axis=(1, 2))
        np.testing.assert_allclose(sig.foreground, mean, atol=1e-12)
        np.testing.assert_allclose(sig.background, mean, atol=1e-12)

    def test_matches_naive_loop(self, rng):
        feats = random_normalized_features(rng, (4, 4, 4))
        probs = rng.uniform(0.1, 0.9, size=(4, 4))
        sig = compute_signatures(feats, probs)
        num_fg = np.zeros(4)
        num_bg = np.zeros(4)
        den_fg = den_bg = 0.0
        for r in range(4):
            for c in range(4):
                num_fg += probs[r, c] * feats[:, r, c]
                num_bg += (1 - probs[r, c]) * feats[:, r, c]
                den_fg += probs[r, c]
                den_bg += 1 - probs[r, c]
        np.testing.assert_allclose(sig.foreground, num_fg / den_fg, atol=1e-12)
        np.testing.assert_allclose(sig.background, num_bg / den_bg, atol=1e-12)

    def test_norm_at_most_one(self, rng):
        feats = random_normalized_features(rng, (6, 5, 5))
        sig = compute_signatures(feats, rng.uniform(0.0, 1.0, size=(5, 5)))
        assert np.linalg.norm(sig.foreground) <= 1.0 + 1e-9
        assert np.linalg.norm(sig.background) <= 1.0 + 1e-9


class TestGlobalPrototype:
    def test_shared_weights(self):
        bank = ClassifierBank(weights=np.tile([1.0, 2.0], (3, 1)), biases=np.zeros(3))
        np.testing.assert_array_equal(global_prototype(bank), [1.0, 2.0])

    def test_opposite_weights_cancel(self):
        w = np.array([[1.0, -2.0], [-1.0, 2.0]])
        bank = ClassifierBank(weights=w, biases=np.zeros(2))
        np.testing.assert_array_equal(global_prototype(bank), [0.0, 0.0])

    def test_matches_loop(self, rng):
        w = rng.standard_normal((5, 7))
        bank = ClassifierBank(weights=w, biases=np.zeros(5))
        expected = sum(w[t] for t in range(5)) / 5.0
        np.testing.assert_allclose(global_prototype(bank), expected, atol=1e-12)


class TestTemporalConsistency:
    def _dummy_states(self, rng, frames, channels=4, side=3):
        feats = random_normalized_features(rng, (frames, channels, side, side))
        bank = ClassifierBank(
            weights=rng.standard_normal((frames, channels)),
            biases=rng.uniform(0.2, 0.8, frames),
            temperature=8.0,
        )
        return query_states(feats, bank)

    def test_perfect_alignment_is_zero(self, rng):
        states = self._dummy_states(rng, 2)
        omega = normalize(rng.standard_normal(4))
        away = -omega  # cos(omega, away) = -1 <= 0
        sigs = [Signatures(omega.copy(), away.copy(), 1.0, 1.0) for _ in range(2)]
        value, _, _ = temporal_consistency_loss(omega, sigs, states)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_worst_case_is_two(self, rng):
        states = self._dummy_states(rng, 3)
        omega = np.array([1.0, 0.0, 0.0, 0.0])
        orthogonal = np.array([0.0, 1.0, 0.0, 0.0])
        sigs = [Signatures(orthogonal.copy(), omega.copy(), 1.0, 1.0)] * 3
        value, _, _ = temporal_consistency_loss(omega, sigs, states)
        assert value == pytest.approx(2.0, abs=1e-12)

    def test_sentinel_signature_contributes_constants(self, rng):
        states = self._dummy_states(rng, 1)
        omega = np.array([1.0, 0.0, 0.0, 0.0])
        sigs = [Signatures(np.zeros(4), np.zeros(4), 0.0, 0.0)]
        value, dw, db = temporal_consistency_loss(omega, sigs, states)
        assert value == pytest.approx(1.0)
        assert (dw == 0.0).all() and (db == 0.0).all()

    def test_value_range_on_realistic_instances(self):
        for seed in range(20):
            local = np.random.default_rng(seed)
            feats = random_normalized_features(local, (4, 6, 5, 5))
            bank = ClassifierBank(
                weights=local.normal(scale=0.6, size=(4, 6)),
                biases=local.uniform(0.1, 0.9, 4),
                temperature=12.0,
            )
            states = query_states(feats, bank)
            sigs = [compute_signatures(s.features[0], s.probs) for s in states]
            value, _, _ = temporal_consistency_loss(
                global_prototype(bank), sigs, states
            )
            assert 0.0 <= value <= 2.0 + 1e-9

    def test_value_invariant_to_raw_feature_scaling(self, rng):
        raw = rng.standard_normal((3, 5, 4, 4))
        bank = ClassifierBank(
            weights=rng.standard_normal((3, 5)),
            biases=rng.uniform(0.2, 0.8, 3),
            temperature=10.0,
        )

        def value_of(scale):
            feats = normalize_columns(scale * raw)
            states = query_states(feats, bank)
            sigs = [compute_signatures(s.features[0], s.probs) for s in states]
            v, _, _ = temporal_consistency_loss(global_prototype(bank), sigs, states)
            return v

        assert value_of(1.0) == pytest.approx(value_of(7.3), abs=1e-9)


class TestDenseContrastive:
    def test_orthogonal_closed_form(self):
        feats = np.eye(4).reshape(4, 2, 2)  # 4 mutually orthogonal unit columns
        value = dense_contrastive_loss(feats, feats, temperature=1.0)
        expected = -math.log(math.e / (math.e + 3.0))
        assert value == pytest.approx(expected, abs=1e-12)

    def test_single_position_is_zero(self, rng):
        feats = random_normalized_features(rng, (5, 1, 1))
        other = random_normalized_features(rng, (5, 1, 1))
        assert dense_contrastive_loss(feats, other, 0.3) == 0.0

    def test_matches_triple_loop(self, rng):
        a = random_normalized_features(rng, (6, 4, 4))
        b = random_normalized_features(rng, (6, 4, 4))
        tau = 0.37
        value = dense_contrastive_loss(a, b, tau)
        fa = a.reshape(6, -1)
        fb = b.reshape(6, -1)
        total = 0.0
        for p in range(16):
            logits = [float(fa[:, p] @ fb[:, q]) / tau for q in range(16)]
            best = max(logits)
            total -= math.log(
                math.exp(best) / sum(math.exp(l) for l in logits)
            )
        assert value == pytest.approx(total / 16.0, abs=1e-9)

    def test_nonpositive_temperature_rejected(self, rng):
        feats = random_normalized_features(rng, (3, 2, 2))
        with pytest.raises(ValueError):
            dense_contrastive_loss(feats, feats, 0.0)


class TestCombinedLoss:
    def _instance(self, rng, frames=3, shots=2, channels=5, side=4):
        query = random_normalized_features(rng, (frames, channels, side, side))
        support, masks = random_support(rng, shots, channels, side, side)
        bank = ClassifierBank(
            weights=rng.standard_normal((frames, channels)),
            biases=rng.uniform(0.2, 0.8, frames),
            temperature=9.0,
        )
        priors = np.tile([0.6, 0.4], (frames, 1))
        return query, support, masks, bank, priors

    def test_zero_weights_reduce_to_ce(self, rng):
        query, support, masks, bank, priors = self._instance(rng)
        breakdown, _ = combined_loss(
            support, masks, query, bank, priors, LossWeights(0.0, 0.0, 0.0)
        )
        assert breakdown.total == pytest.approx(breakdown.ce, abs=1e-12)

    def test_identity_of_total(self, rng):
        query, support, masks, bank, priors = self._instance(rng)
        weights = LossWeights(0.5, 1.5, 0.25)
        breakdown, _ = combined_loss(support, masks, query, bank, priors, weights)
        expected = (
            breakdown.ce
            + weights.entropy * breakdown.entropy
            + weights.kl * breakdown.kl
            + weights.consistency * breakdown.consistency
        )
        assert breakdown.total == pytest.approx(expected, abs=1e-9)

    def test_single_frame_reduces_to_per_frame_terms(self, rng):
        query, support, masks, bank, priors = self._instance(rng, frames=1)
        weights = LossWeights(0.5, 1.5, 0.0)
        breakdown, probs = combined_loss(
            support, masks, query, bank, priors, weights
        )
        ce, _, _ = support_cross_entropy(
            support, masks, bank.weights[0], float(bank.biases[0]), bank.temperature
        )
        frame_probs = predict(query[0], bank.frame(0))
        entropy, _ = entropy_loss(frame_probs)
        kl, _ = kl_loss(label_marginal(frame_probs), priors[0])
        assert breakdown.ce == pytest.approx(ce, abs=1e-12)
        assert breakdown.entropy == pytest.approx(entropy, abs=1e-12)
        assert breakdown.kl == pytest.approx(kl, abs=1e-12)
        assert breakdown.consistency == 0.0

    def test_probability_output_matches_predict(self, rng):
        query, support, masks, bank, priors = self._instance(rng)
        _, probs = combined_loss(
            support, masks, query, bank, priors, LossWeights(1.0, 1.0, 0.0)
        )
        for t in range(query.shape[0]):
            np.testing.assert_allclose(
                probs[t].reshape(query.shape[2:]),
                predict(query[t], bank.frame(t)),
                atol=1e-12,
            )
