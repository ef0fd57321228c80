import sys

import numpy as np
import pytest

from monompc import models


@pytest.fixture(scope="session")
def scalar_model():
    return models.build_scalar_monotone()


@pytest.fixture(scope="session")
def di_model():
    return models.build_double_integrator()


@pytest.fixture(scope="session")
def cstr1():
    return models.build_cstr(1)


@pytest.fixture(scope="session")
def cstr2():
    return models.build_cstr(2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
