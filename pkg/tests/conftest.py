import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from balcause import Dataset, covariate_basis, parse_basis  # noqa: E402
from balcause.propensity import BetaDensity  # noqa: E402

# n=6, K=1, covariates (1, x): every level's weighted covariate mean can reach
# the overall mean, so the exactly identified balance problem has a root.
TOY_X = np.array([-0.5, -0.8, 0.2, 0.1, 0.6, 0.9])
TOY_A = np.array([0, 1, 0, 1, 1, 0])
TOY_Y = np.array([1.2, 2.5, 0.7, 3.1, 2.2, 1.0])

# n=5 continuous toy on (0, 20)
CTOY_A = np.array([4.0, 6.5, 7.2, 9.0, 12.5])
CTOY_X = np.array([0.3, -0.7, 1.1, 0.2, -0.4])
CTOY_Y = np.array([0.8, 1.4, 1.1, 0.5, 1.9])
CTOY_BETA = np.array([-0.4, 0.3, 6.0])
CTOY_SCALE = 20.0


@pytest.fixture
def toy_cat():
    X = np.column_stack([np.ones(6), TOY_X])
    return Dataset(TOY_A, TOY_Y, X, ("intercept", "x"), intercept=True)


@pytest.fixture
def toy_cont():
    X = np.column_stack([np.ones(5), CTOY_X])
    return Dataset(CTOY_A, CTOY_Y, X, ("intercept", "x"), intercept=True)


@pytest.fixture
def toy_cont_family():
    return BetaDensity(2, CTOY_SCALE)


@pytest.fixture
def toy_cont_basis():
    return parse_basis("x,a", 2)


@pytest.fixture
def cov_basis2():
    return covariate_basis(2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
