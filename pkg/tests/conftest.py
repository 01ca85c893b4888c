import numpy as np
import pytest

from crossutt.model import ModelConfig, generate_weights

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def toy():
    cfg = ModelConfig.toy()
    return cfg, generate_weights(0, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
