"""Shared fixtures: small backbones, toy corpora, and rigged rngs."""

import numpy as np
import pytest

from rine.backbone import ViTConfig, random_backbone
from rine.data import synth_toy_dataset
from rine.kernels import Rng


@pytest.fixture(scope="session")
def tiny_vit():
    """Cheap 2-block backbone for unit tests (width 16, 16x16 inputs)."""
    config = ViTConfig(width=16, blocks=2, patch=4, heads=2, image_side=16)
    return config, random_backbone(config, Rng(6))


@pytest.fixture(scope="session")
def toy_vit():
    """The standard toy backbone: d=64, n=6, patch 8, 32x32 inputs."""
    config = ViTConfig(width=64, blocks=6, patch=8, heads=4, image_side=32)
    return config, random_backbone(config, Rng(5))


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """60-per-class 16x16 corpus matching tiny_vit; amplitude 0.5."""
    root = tmp_path_factory.mktemp("small_corpus")
    synth_toy_dataset(root, 60, 16, 0.5, Rng(1), patch=4)
    return root


class RiggedRng:
    """Duck-typed rng whose draws are scripted for deterministic transforms.

    ``coin`` is returned by random() (>= 0.5 skips probabilistic steps);
    uniform/integers return midpoints unless explicit values are queued.
    """

    def __init__(self, coin=1.0, uniform_values=None, integer_values=None):
        self.coin = coin
        self._uniform = list(uniform_values or [])
        self._integers = list(integer_values or [])

    def random(self, shape=None, dtype=np.float64):
        if shape is None:
            return self.coin
        return np.full(shape, self.coin, dtype=dtype)

    def uniform(self, low, high, shape=None):
        if self._uniform:
            value = self._uniform.pop(0)
        else:
            value = (low + high) / 2.0
        if shape is None:
            return value
        return np.full(shape, value)

    def integers(self, low, high, shape=None):
        if self._integers:
            value = self._integers.pop(0)
        else:
            value = (low + high) // 2
        if shape is None:
            return value
        return np.full(shape, value, dtype=np.int64)

    def normal(self, loc, scale, shape=None):
        if shape is None:
            return loc
        return np.full(shape, loc)
