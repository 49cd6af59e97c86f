"""
Pytest fixtures for voxslice tests

This module provides small configs, scenes and models shared across tests.
"""

import os
import sys

import numpy as np
import pytest

# Make the package and tests/fixtures importable without installation
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TESTS_PATH = os.path.join(PROJECT_ROOT, "tests")
sys.path.insert(0, PROJECT_ROOT)
sys.path.insert(0, TESTS_PATH)

from voxslice.config import (
    ClassHeightProfile,
    ExperimentConfig,
    ModelConfig,
    SceneConfig,
    TrainConfig,
)
from voxslice.params import ModuleParams
from voxslice.synthscene import generate
from voxslice.vsf import default_partition


@pytest.fixture(scope="session")
def tiny_scene_config():
    """An 8x8x8 scene over [-5, 3] m (1 m voxels) with three classes."""
    return SceneConfig(
        grid=(8, 8, 8),
        channels=4,
        objects_per_scene=4,
        classes=(
            ClassHeightProfile(1, "low-wide", (-5.0, -4.0), (3, 5), 1.0, "large"),
            ClassHeightProfile(2, "mid-narrow", (-2.0, 2.0), (1, 2), 2.0, "small"),
            ClassHeightProfile(3, "tall", (-4.0, 3.0), (2, 3), 1.0, "large"),
        ),
    )


@pytest.fixture(scope="session")
def tiny_experiment(tiny_scene_config):
    """Experiment config sized for second-scale training runs."""
    return ExperimentConfig(
        scene=tiny_scene_config,
        model=ModelConfig.for_scene(tiny_scene_config, channels=4, reduction=2),
        train=TrainConfig(steps=4, batch_size=1, eval_every=2, seeds=(0, 1), n_train=3, n_val=2),
    ).validate()


@pytest.fixture(scope="session")
def default_scene_config():
    return SceneConfig()


@pytest.fixture(scope="session")
def tiny_samples(tiny_scene_config):
    """Three generated scenes on the tiny grid."""
    return [generate(tiny_scene_config, seed) for seed in range(3)]


@pytest.fixture
def rng():
    """Fresh seeded generator per test."""
    return np.random.default_rng(1234)


@pytest.fixture
def params():
    """Empty parameter set with seed 0."""
    return ModuleParams(seed=0)


@pytest.fixture(scope="session")
def partition_z16():
    """Default six-band partition on 16 height voxels."""
    return default_partition(16)


@pytest.fixture(scope="session")
def partition_z8():
    """Default six-band partition on 8 height voxels."""
    return default_partition(8)
