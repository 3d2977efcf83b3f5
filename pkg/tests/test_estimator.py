import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fewvos import SyntheticSpec, generate_synthetic
from fewvos.estimator import TransductiveVideoSegmenter


@pytest.fixture
def episode():
    return generate_synthetic(
        SyntheticSpec(channels=10, height=10, width=10, frames=4, shots=3,
                      drift=0.02, noise=0.15, seed=21)
    )


class TestSklearnProtocol:
    def test_get_params_round_trip(self):
        model = TransductiveVideoSegmenter(iterations=7, mode="baseline")
        params = model.get_params()
        assert params["iterations"] == 7
        assert params["mode"] == "baseline"
        rebuilt = TransductiveVideoSegmenter(**params)
        assert rebuilt.get_params() == params

    def test_set_params(self):
        model = TransductiveVideoSegmenter()
        model.set_params(learning_rate=0.01, refine_iterations=3)
        assert model.learning_rate == 0.01
        assert model.refine_iterations == 3

    def test_clone(self):
        model = TransductiveVideoSegmenter(temperature=12.5)
        assert clone(model).temperature == 12.5

    def test_predict_before_fit_raises(self):
        with pytest.raises(NotFittedError):
            TransductiveVideoSegmenter().predict()


class TestFitPredict:
    def test_shapes_and_attributes(self, episode):
        model = TransductiveVideoSegmenter(iterations=12, prior_update_iteration=4,
                                           refine_iterations=3)
        model.fit(episode.query.values, episode.support.features,
                  episode.support.masks)
        assert model.masks_.shape == episode.gt.shape
        assert model.predict_proba().shape == episode.gt.shape
        assert model.classifier_bank_.n_frames == episode.n_frames
        assert model.trace_.records

    def test_fit_returns_self(self, episode):
        model = TransductiveVideoSegmenter(iterations=5, prior_update_iteration=2,
                                           refine_iterations=0)
        assert model.fit(episode.query.values, episode.support.features,
                         episode.support.masks) is model

    def test_score_on_easy_episode(self):
        easy = generate_synthetic(SyntheticSpec(seed=13, drift=0.0, noise=0.1))
        model = TransductiveVideoSegmenter(mode="baseline")
        model.fit(easy.query.values, easy.support.features, easy.support.masks)
        assert model.score(easy.gt) >= 0.95

    def test_rejects_nonbinary_masks(self, episode):
        bad = episode.support.masks.astype(float) * 0.5
        with pytest.raises(ValueError):
            TransductiveVideoSegmenter(iterations=3, prior_update_iteration=1).fit(
                episode.query.values, episode.support.features, bad
            )

    def test_rejects_bad_mode(self, episode):
        model = TransductiveVideoSegmenter(mode="bogus")
        with pytest.raises(ValueError):
            model.fit(episode.query.values, episode.support.features,
                      episode.support.masks)

    def test_modes_produce_different_banks(self, episode):
        fits = {}
        for mode in ("baseline", "naive"):
            model = TransductiveVideoSegmenter(
                mode=mode, iterations=15, prior_update_iteration=5
            )
            model.fit(episode.query.values, episode.support.features,
                      episode.support.masks)
            fits[mode] = model.classifier_bank_.weights.copy()
        assert not np.allclose(fits["baseline"], fits["naive"])
