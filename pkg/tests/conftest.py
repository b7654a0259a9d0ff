"""Global fixtures for pixelcontrast tests."""

from dataclasses import replace

import pytest

from pixelcontrast.config import TrainConfig, resolve_config
from pixelcontrast.core import Rng
from pixelcontrast.data import Dataset, SynthSpec, generate

from .const import TINY_OVERRIDES, TINY_SPEC


@pytest.fixture(name="rng")
def rng_fixture() -> Rng:
    """Seeded random stream."""
    return Rng(1234)


@pytest.fixture(name="tiny_spec")
def tiny_spec_fixture() -> SynthSpec:
    """Small synthetic dataset recipe."""
    return SynthSpec(**TINY_SPEC)


@pytest.fixture(name="tiny_dataset")
def tiny_dataset_fixture(tiny_spec: SynthSpec) -> Dataset:
    """Small generated dataset."""
    return generate(tiny_spec)


@pytest.fixture(name="tiny_config")
def tiny_config_fixture() -> TrainConfig:
    """Configuration sized for tiny_dataset."""
    return resolve_config(overrides=TINY_OVERRIDES)


@pytest.fixture(name="all_train_dataset")
def all_train_dataset_fixture(tiny_dataset: Dataset) -> Dataset:
    """tiny_dataset with every image in the training split."""
    return replace(tiny_dataset, splits=["train"] * len(tiny_dataset))
