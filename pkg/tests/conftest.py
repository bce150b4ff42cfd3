import numpy as np
import pytest
from hypothesis import settings

from merobust.simlab import SimConfig, generate

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def null_data():
    return generate(SimConfig(n=2000, tau=0.7), 0)


@pytest.fixture(scope="session")
def big_null_data():
    return generate(SimConfig(n=20000, tau=0.7), 1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
