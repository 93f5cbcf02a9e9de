import numpy as np
import pytest

from dsaflow.ica import IcaConfig
from dsaflow.phantom import PhantomSpec, generate_phantom
from dsaflow.pipeline import decompose

# lines recorded by test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def flagship():
    """Default phantom (seed 42) and its decomposition with p=3, seed 42."""
    series, truth = generate_phantom(PhantomSpec())
    dec = decompose(series, IcaConfig(p=3, seed=42))
    return series, truth, dec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
