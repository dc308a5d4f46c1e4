from pathlib import Path

import numpy as np
import pytest

from fedbaf import config as config_io
from fedbaf.config import ExperimentConfig

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def load_config(name: str) -> ExperimentConfig:
    return config_io.load(CONFIGS / name)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    """A few-second federated setup used by the engine and CLI tests."""
    return ExperimentConfig().replace(
        data=dict(num_classes=4, dim=5, n_per_class=30, test_n_per_class=20, spread=0.5),
        partition=dict(num_clients=4, mode="noniid", class_fraction=0.5),
        model=dict(kind="linear"),
        training=dict(rounds=5, epochs=1, lr=0.1, batch_size=8, participation=0.5),
        strategy=dict(psi=1.0),
        pretrain=dict(epochs=5, n_per_class=30, test_n_per_class=20),
    )
