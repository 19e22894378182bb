import logging

import numpy as np
import pytest

from mrgpr.gp_core import Hyperparameters, pairs_from_arrays

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_problem(rng, m, d=4, spread=1.0, jitter=1e-8):
    X = rng.uniform(-spread, spread, size=(m, d))
    u = rng.normal(size=m)
    hp = Hyperparameters(rng.uniform(0.5, 2.0), tuple(rng.uniform(0.5, 2.0, size=d)), jitter)
    return X, u, hp, pairs_from_arrays(X, u)


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
