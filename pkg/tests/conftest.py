import numpy as np
import pytest
import torch

from ctdenoise.data import SplitSpec, make_synthetic_blobs, split
from ctdenoise.losses import LossWeights, SelectionSchedule
from ctdenoise.models import MergeConfig
from ctdenoise.training import TrainConfig


@pytest.fixture(scope="session")
def blobs10():
    """Well-separated 10-class blobs, the standard desk-scale fixture."""
    return make_synthetic_blobs(k=10, n_per_class=200, dim=32, separation=4.0, seed=0)


@pytest.fixture(scope="session")
def blobs_split(blobs10):
    return split(blobs10, SplitSpec(train_fraction=0.8, seed=1, stratified=True))


@pytest.fixture()
def tiny_train_config():
    """A config small enough for unit tests that still runs every loss term."""
    return TrainConfig(
        schedule=SelectionSchedule(noise_rate_estimate=0.2, warmup_epochs=5),
        weights=LossWeights(0.1, 0.1, 0.1),
        merge=MergeConfig(),
        learning_rate=1e-3,
        epochs=3,
        batch_size=64,
        seed=0,
        warmup_epochs=1,
    )


@pytest.fixture(autouse=True)
def _torch_deterministic():
    torch.manual_seed(0)
    np.random.seed(0)
