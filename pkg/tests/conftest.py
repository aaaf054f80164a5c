import numpy as np
import pytest

from skewgrad.data import make_uda_benchmark
from skewgrad.model import init_params
from skewgrad.trainer import TrainConfig


@pytest.fixture(scope="session")
def tiny_benchmark():
    return make_uda_benchmark(6, 6, K=4, seed=3, n_points=32)


@pytest.fixture
def tiny_config():
    return TrainConfig(batch_size=8, steps_stage1=6, steps_stage2=4, learning_rate=0.05, seed=11,
                       hidden=16, feature_dim=24)


@pytest.fixture
def small_params():
    return init_params(5, hidden=16, feature_dim=24, n_classes=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, appended by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
