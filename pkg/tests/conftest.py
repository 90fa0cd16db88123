"""Pytest configuration and fixtures for MIA-Former tests."""

from collections.abc import Iterator

import pytest
import torch

from mia_former.data.loaders import DatasetHandle, load_dataset
from mia_former.model.former import MIAFormer
from mia_former.plotting.core import close_all_figures
from mia_former.types import DatasetSpec, MIAConfig

FAST_TRAINING = {
    "batch_size": 16,
    "backbone_epochs": 1,
    "backbone_lr": 3e-3,
    "controller_pretrain_lr": 1e-2,
    "controller_pretrain_max_epochs": 40,
    "cotrain_epochs": 2,
    "rl_frozen_epochs": 1,
    "rl_epochs": 2,
}


@pytest.fixture
def cfg() -> MIAConfig:
    """Return the tiny configuration (L=4, H=4, E=16, 4x4 tokens)."""
    return MIAConfig.tiny()


@pytest.fixture
def fast_cfg() -> MIAConfig:
    """Return the tiny configuration with a short training schedule."""
    return MIAConfig.tiny(training=FAST_TRAINING)


@pytest.fixture
def model(cfg: MIAConfig) -> MIAFormer:
    """Return a seeded, untrained model."""
    return MIAFormer(cfg, torch.Generator().manual_seed(0))


@pytest.fixture
def images() -> torch.Tensor:
    """Return a batch of 6 random [0, 1] images."""
    return torch.rand(6, 3, 32, 32, generator=torch.Generator().manual_seed(1))


@pytest.fixture
def labels() -> torch.Tensor:
    """Return labels matching the ``images`` batch."""
    return torch.tensor([0, 1, 2, 3, 4, 5])


@pytest.fixture(scope="session")
def small_data() -> DatasetHandle:
    """Return a 96-sample synthetic dataset (72 train, 24 val)."""
    return load_dataset(DatasetSpec(num_samples=96, val_fraction=0.25, seed=7))


@pytest.fixture(autouse=True)
def _close_figures() -> Iterator[None]:
    """Close figures left open by a test."""
    yield
    close_all_figures()
