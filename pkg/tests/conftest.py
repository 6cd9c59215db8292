import numpy as np
import pytest
from hypothesis import settings

from sgdthermo import experiments, models

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    """Collect one acceptance line; printed at the end of the session."""
    line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


@pytest.fixture(scope="session")
def regression_data():
    return models.gen_regression_dataset(200, 0.1, 1)


@pytest.fixture(scope="session")
def small_data():
    return models.gen_regression_dataset(20, 0.1, 3)


@pytest.fixture(scope="session")
def nonlinear():
    return models.nonlinear_regression()


@pytest.fixture(scope="session")
def theta0(nonlinear, regression_data):
    return experiments.locate_minimum(nonlinear, regression_data)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_spd(rng, N, cond=10.0):
    Q, _ = np.linalg.qr(rng.normal(size=(N, N)))
    ev = np.exp(rng.uniform(0, np.log(cond), N))
    return (Q * ev) @ Q.T
