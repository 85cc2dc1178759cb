import numpy as np
import pytest
import torch

from textscrub.model import ModelConfig
from textscrub.synth import make_scene, make_triplet


def pytest_configure(config):
    # keep CPU math reproducible across the suite
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    """Small architecture for fast structural tests."""
    return ModelConfig(
        latent_channels=8, backbone_width=12, num_residual_blocks=2, iterations=3
    )


@pytest.fixture(scope="session")
def toy_triplets():
    """A handful of small synthetic triplets (part masks)."""
    triplets = []
    for seed in range(6):
        scene = make_scene(48, 48, seed=seed, min_instances=1, max_instances=2)
        triplets.append(make_triplet(scene, alpha=0.4, seed=seed + 100))
    return triplets
