import numpy as np
import pytest

from iglide import data as D

# filled by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_fleet():
    cfg = D.SynthCfg(n_units=6, n_channels=6, n_groups=3, min_length=40, max_length=60)
    return D.make_synthetic(cfg, 7)
