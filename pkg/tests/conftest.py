import numpy as np
import pytest

from fewvos import SyntheticSpec, generate_synthetic
from fewvos.numerics import normalize_columns


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_normalized_features(rng, shape):
    """Unit-column feature maps of the given [..., C, H, W] shape."""
    return normalize_columns(rng.standard_normal(shape))


def random_support(rng, shots, channels, height, width, density=0.4):
    """Normalized support features plus masks with at least one positive."""
    feats = random_normalized_features(rng, (shots, channels, height, width))
    masks = (rng.random((shots, height, width)) < density).astype(np.uint8)
    for k in range(shots):
        if masks[k].sum() == 0:
            masks[k, rng.integers(height), rng.integers(width)] = 1
    return feats, masks


@pytest.fixture
def tiny_episode():
    return generate_synthetic(
        SyntheticSpec(channels=8, height=8, width=8, frames=4, shots=2,
                      drift=0.02, noise=0.2, seed=11)
    )
