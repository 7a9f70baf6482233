"""
Pytest configuration and fixtures for EdgeFM tests.

This module provides small synthetic worlds, pools, datasets, trained models
and run-configuration files shared across the test suites.
"""

import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from src.customizer import DistillBatch, SmallModel, TrainConfig, train
from src.fm_oracle import SampleStream, build_pool, world_create
from src.model_select import DeviceProfile

SMALL_CONFIG = """
[app]
seed = 0

[world]
seed = 3
num_classes = 4
input_dim = 32
embed_dim = 8

[train]
epochs = 5
batch_size = 16

[customize]
samples = 60

[netadapt]
calibration_size = 40

[scenario]
arrival_rate = 1.0
duration = 40.0
update_interval = 20.0
retrain_cost = 1.0
min_upload = 10
bootstrap_samples = 40
window_seconds = 10.0

[trace]
constant_mbps = 55.0
"""


@pytest.fixture(scope="session")
def test_data_dir():
    """Path to test data directory."""
    return Path(__file__).parent / "test_data"


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    temp_path = Path(tempfile.mkdtemp())
    yield temp_path
    if temp_path.exists():
        shutil.rmtree(temp_path)


@pytest.fixture(scope="session")
def small_world():
    """Four classes in an 8-dimensional embedding space, 32-dimensional raw inputs."""
    return world_create(seed=3, num_classes=4, input_dim=32, embed_dim=8, noise_sigma=0.1)


@pytest.fixture(scope="session")
def small_pool(small_world):
    return build_pool(small_world, small_world.class_names)


@pytest.fixture(scope="session")
def small_dataset(small_world):
    return SampleStream(small_world, seed=1).take(200)


@pytest.fixture(scope="session")
def trained(small_world, small_pool, small_dataset):
    """(model, log) after semantic customization on the small world."""
    cfg = TrainConfig(epochs=60, learning_rate=0.05, batch_size=16, seed=0)
    return train(small_world, small_pool, small_dataset, cfg, hidden_dim=16)


@pytest.fixture
def trained_model(trained):
    return trained[0].copy()


@pytest.fixture
def untrained_model(small_world):
    return SmallModel.initialize(small_world.input_dim, 16, small_world.embed_dim, seed=0)


@pytest.fixture
def profile():
    return DeviceProfile(
        device_id="jetson_nano",
        task_tag="vision",
        memory_budget=64e6,
        flops_budget=2e9,
    )


@pytest.fixture
def random_batch():
    """Factory for a DistillBatch of random unit vectors with P = D = 8."""

    def make(batch_size: int, seed: int, dim: int = 8, classes: int = 5) -> DistillBatch:
        rng = np.random.default_rng(seed)

        def unit_rows(n):
            m = rng.standard_normal((n, dim))
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        return DistillBatch(
            raw=rng.standard_normal((batch_size, dim)),
            fm=unit_rows(batch_size),
            text=unit_rows(batch_size),
            weights=rng.uniform(0.0, 1.0, batch_size),
            targets=rng.integers(0, classes, batch_size),
            class_matrix=unit_rows(classes),
            sample_ids=np.arange(batch_size),
        )

    return make


@pytest.fixture
def config_file(temp_dir):
    """Write the small run configuration (plus any extra TOML) and return its path."""

    def write(extra: str = "", name: str = "config.toml") -> Path:
        path = temp_dir / name
        path.write_text(SMALL_CONFIG + extra, encoding="utf-8")
        return path

    return write
