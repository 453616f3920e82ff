from __future__ import annotations

import numpy as np
import pytest

from pacsnoc.controllers import AffineController
from pacsnoc.cost import QuadraticCost
from pacsnoc.dynamics import ScalarLTI, build_robot_system


@pytest.fixture
def lti():
    return ScalarLTI(0.8, 0.1, 2.0)


@pytest.fixture
def lq():
    return QuadraticCost([5.0], [0.003])


@pytest.fixture
def robots():
    return build_robot_system()


@pytest.fixture
def zero_ctrl():
    return AffineController(0.0, 0.0)


def zero_noise(T, n=1, s=None):
    shape = (T + 1, n) if s is None else (s, T + 1, n)
    return np.zeros(shape)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
