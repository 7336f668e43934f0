import pytest
import torch

from cdgan.data import SyntheticDomainSpec, make_synthetic
from cdgan.model import ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def micro_config():
    """The gradient-check model: 8px images, 8 base channels, 2 domains."""
    return ModelConfig(n_domains=2, image_size=8, base_channels=8, disc_depth=3)


@pytest.fixture
def small_config():
    return ModelConfig(n_domains=4, image_size=16, base_channels=8, n_residual_blocks=2,
                       disc_depth=3)


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_synthetic(SyntheticDomainSpec(n_domains=4, images_per_domain=10, image_size=16,
                                              seed=3))


@pytest.fixture(scope="session")
def synth32():
    return make_synthetic(SyntheticDomainSpec(n_domains=4, images_per_domain=200, image_size=32,
                                              seed=7))
