"""Shared fixtures: tiny model configurations and seeded signal helpers."""

import numpy as np
import pytest

from sparsesep.model import ModelConfig, SeparatorModel


@pytest.fixture
def rng():
    return np.random.default_rng(0xBEEF)


@pytest.fixture
def tiny_config():
    """Smallest joint model that exercises every layer type."""
    return ModelConfig(kernel=40, n_filters=8, n_stacks=1, layers_per_stack=2,
                       tcn_kernel=3, bottleneck=8, hidden=8, embed_dim=4,
                       n_mels=8, vad_tap=1, vad_branch=True)


@pytest.fixture
def tiny_model(tiny_config):
    return SeparatorModel(tiny_config, seed=7)


@pytest.fixture
def small_config():
    """A config with several stacks, for early-exit and tap-sweep tests."""
    return ModelConfig(kernel=40, n_filters=16, n_stacks=3, layers_per_stack=2,
                       tcn_kernel=3, bottleneck=12, hidden=16, embed_dim=6,
                       n_mels=16, vad_tap=1, vad_branch=True)


@pytest.fixture
def small_model(small_config):
    return SeparatorModel(small_config, seed=11)
