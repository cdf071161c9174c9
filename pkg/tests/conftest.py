import numpy as np
import pytest

from fliu.dataset import generate_synthetic, split_per_class

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_split():
    """10-class blobs, 60 train / 20 test samples per class."""
    full = generate_synthetic(10, 80, 12, 6.0, seed=3)
    return split_per_class(full, 60)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
