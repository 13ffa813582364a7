import numpy as np
import pytest

from cyclemerge.model import random_mlp
from cyclemerge.training import SyntheticSpec, TrainConfig, make_dataset, train_mlp

SPIRAL_DIMS = [2, 64, 64, 32, 2]
SPIRAL_SPEC = SyntheticSpec("spirals", 1000, 2, 2, 0.05, 0)
SPIRAL_SEEDS = (1, 2, 3, 4, 5)


def spiral_train_config(seed):
    return TrainConfig(epochs=200, batch_size=50, lr=0.05, seed=seed)


@pytest.fixture(scope="session")
def spirals():
    return make_dataset(SPIRAL_SPEC)


@pytest.fixture(scope="session")
def spiral_models(spirals):
    """Five independently trained spiral MLPs (seeds 1..5)."""
    return [train_mlp(spirals.train, SPIRAL_DIMS, spiral_train_config(s)) for s in SPIRAL_SEEDS]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_pair(rng):
    return random_mlp([4, 5, 5, 3], rng), random_mlp([4, 5, 5, 3], rng)



def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
