import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from fewvos.errors import EmptyForegroundError
from fewvos.numerics import (
    cosine_similarity,
    distance_transform,
    finite_difference_gradient,
    normalize,
    normalize_columns,
    sigmoid,
)

finite_floats = st.floats(min_value=-100, max_value=100, allow_nan=False)


def brute_force_distance(mask):
    """O(H^2 W^2) nearest-positive search."""
    h, w = mask.shape
    positives = [(r, c) for r in range(h) for c in range(w) if mask[r, c]]
    out = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            out[r, c] = min(
                math.hypot(r - pr, c - pc) for pr, pc in positives
            )
    return out


class TestNormalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(normalize([3.0, 4.0]), [0.6, 0.8])

    def test_zero_vector_maps_to_sentinel(self):
        assert (normalize([0.0, 0.0]) == 0.0).all()

    def test_random_vector_has_unit_norm(self, rng):
        v = rng.standard_normal(8)
        out = normalize(v)
        assert abs(np.linalg.norm(out) - 1.0) <= 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            normalize(np.array([]))

    @given(st.lists(finite_floats, min_size=1, max_size=10))
    def test_idempotent(self, values):
        once = normalize(np.array(values))
        twice = normalize(once)
        np.testing.assert_allclose(twice, once, atol=1e-12)

    def test_columns_sentinel_and_unit(self, rng):
        f = rng.standard_normal((4, 3, 3))
        f[:, 1, 1] = 0.0
        out = normalize_columns(f)
        norms = np.linalg.norm(out, axis=0)
        assert norms[1, 1] == 0.0
        others = np.delete(norms.ravel(), 4)
        np.testing.assert_allclose(others, 1.0, atol=1e-12)


class TestCosineSimilarity:
    def test_self_similarity(self, rng):
        v = rng.standard_normal(5)
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_antiparallel(self):
        assert cosine_similarity([1.0, 0.0], [-2.0, 0.0]) == -1.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            cosine_similarity([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_zero_vector_gives_zero(self):
        assert cosine_similarity([0.0, 0.0], [1.0, 2.0]) == 0.0

    @given(
        st.lists(finite_floats, min_size=2, max_size=6),
        st.floats(min_value=1e-3, max_value=1e3),
        st.floats(min_value=1e-3, max_value=1e3),
    )
    def test_scale_invariance(self, values, alpha, beta):
        a = np.array(values)
        b = a[::-1].copy()
        # scale invariance only applies above the zero-sentinel threshold
        assume(np.linalg.norm(a) >= 1e-6)
        base = cosine_similarity(a, b)
        scaled = cosine_similarity(alpha * a, beta * b)
        assert abs(scaled - base) <= 1e-12


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(0.0) == 0.5

    def test_large_negative_stays_positive(self):
        value = sigmoid(-800.0)
        assert 0.0 < value <= 1e-300
        assert math.isfinite(value)

    def test_closed_form_at_two(self):
        assert sigmoid(2.0) == pytest.approx(0.8807970779778823, abs=1e-15)

    @given(st.floats(min_value=-50, max_value=50))
    def test_symmetry(self, x):
        assert abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-12

    def test_array_input(self, rng):
        x = rng.standard_normal((3, 4))
        out = sigmoid(x)
        assert out.shape == x.shape
        assert ((out > 0) & (out < 1)).all()


class TestDistanceTransform:
    def test_one_row(self):
        np.testing.assert_array_equal(
            distance_transform(np.array([[1, 0, 0]])), [[0.0, 1.0, 2.0]]
        )

    def test_center_positive_corners(self):
        mask = np.zeros((3, 3), dtype=np.uint8)
        mask[1, 1] = 1
        out = distance_transform(mask)
        for corner in [(0, 0), (0, 2), (2, 0), (2, 2)]:
            assert out[corner] == pytest.approx(math.sqrt(2.0))

    def test_matches_brute_force(self, rng):
        for _ in range(5):
            mask = (rng.random((16, 16)) < 0.1).astype(np.uint8)
            if mask.sum() == 0:
                mask[0, 0] = 1
            np.testing.assert_array_equal(
                distance_transform(mask), brute_force_distance(mask)
            )

    def test_all_zero_raises(self):
        with pytest.raises(EmptyForegroundError):
            distance_transform(np.zeros((4, 4)))

    def test_zero_at_positives_positive_elsewhere(self, rng):
        mask = (rng.random((10, 10)) < 0.2).astype(np.uint8)
        mask[3, 3] = 1
        out = distance_transform(mask)
        assert (out[mask == 1] == 0.0).all()
        assert (out[mask == 0] > 0.0).all()


class TestFiniteDifferenceGradient:
    def test_square(self):
        grad = finite_difference_gradient(lambda p: float(p[0] ** 2), np.array([3.0]))
        assert grad[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        grad = finite_difference_gradient(lambda p: 7.5, np.zeros(4))
        np.testing.assert_array_equal(grad, np.zeros(4))

    def test_multivariate(self):
        def f(p):
            return float(p[0] * p[1] + math.sin(p[2]))

        p = np.array([2.0, -1.0, 0.3])
        grad = finite_difference_gradient(f, p)
        np.testing.assert_allclose(grad, [-1.0, 2.0, math.cos(0.3)], atol=1e-8)
