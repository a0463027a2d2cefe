"""Shared fixtures: the frozen mixture corpus splits and trained models.

The two trainings are expensive (a few minutes each on CPU), so they are
session-scoped and reused by the trainer, sampler, and acceptance tests.
"""

import numpy as np
import pytest

from latentdb import FlowNetConfig, TrainConfig, train
from latentdb import fixtures

MIX_FLOW_CONFIG = FlowNetConfig(dim=16, time_dim=16, width=128, expansion=256, depth=4)
MIX_TRAIN_CONFIG = TrainConfig(
    epochs=200, batch_size=512, lr_max=3e-4, lr_min=1e-6,
    seed=3, validate_every=10, validation_sample_count=2048,
)
MIX20K_TRAIN_CONFIG = TrainConfig(
    epochs=200, batch_size=512, lr_max=3e-4, lr_min=1e-6,
    seed=4, validate_every=10, validation_sample_count=2048,
)


@pytest.fixture(scope="session")
def mix_train10k():
    return fixtures.make_role("train10k")


@pytest.fixture(scope="session")
def mix_train20k():
    return fixtures.make_role("train20k")


@pytest.fixture(scope="session")
def mix_heldout10k():
    return fixtures.make_role("heldout10k")


@pytest.fixture(scope="session")
def mix_refs():
    return fixtures.make_role("refs1k")


@pytest.fixture(scope="session")
def mix_pool():
    return fixtures.make_role("pool50k")


@pytest.fixture(scope="session")
def trained_mix_model(mix_train10k):
    """100-epoch flow model on the 10k mixture corpus (with FD log)."""
    return train(mix_train10k, MIX_TRAIN_CONFIG, MIX_FLOW_CONFIG)


@pytest.fixture(scope="session")
def trained_mix_model_20k(mix_train20k):
    """100-epoch flow model on the 20k corpus used by the scaling sweep."""
    return train(mix_train20k, MIX20K_TRAIN_CONFIG, MIX_FLOW_CONFIG)


@pytest.fixture(scope="session")
def standard_noise_10k():
    rng = np.random.default_rng(5)
    from latentdb import EmbeddingMatrix

    return EmbeddingMatrix.from_array(
        rng.standard_normal((10000, fixtures.MIXTURE_DIM)).astype(np.float32)
    )
