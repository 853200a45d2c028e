import numpy as np
import pytest

from latentctrl import experiments as X
from latentctrl import synthworld as sw
from latentctrl.classifier import TrainConfig
from latentctrl.numeric import Rng


@pytest.fixture(scope="session")
def world():
    return sw.default_world(seed=0)


@pytest.fixture(scope="session")
def trained(world):
    """Classifiers for every default-world attribute, 30 examples per class."""
    return X.train_classifiers(world, TrainConfig(), Rng(2024).spawn("clf"))


@pytest.fixture(scope="session")
def bank(world):
    return sw.sample_bank(world, 100_000, Rng(2024).spawn("bank"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
