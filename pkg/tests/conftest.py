"""Shared helpers: seeded inputs that are stable across test runs."""
import pytest
import torch

from pairtune.encoder import FeatureVolume, ToyBackbone
from pairtune.seeding import rng_for
from pairtune.tensors import DTYPE


def seeded_image(seed, height, width=None):
    rng = rng_for("test-image", seed)
    width = width or height
    return torch.as_tensor(rng.random((height, width, 3)), dtype=DTYPE)


def seeded_volume(seed, height, width, channels):
    rng = rng_for("test-volume", seed)
    data = rng.normal(0.0, 1.0, (height, width, channels))
    return FeatureVolume(
        data=torch.as_tensor(data, dtype=DTYPE),
        level_offsets=((1, 0, channels),),
    )


@pytest.fixture
def backbone():
    return ToyBackbone(seed=0)
