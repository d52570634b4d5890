from __future__ import annotations

import sys

import numpy as np
import pytest

from sdec.mdp import make_benchmark_env, make_tabular_mdp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def chain5():
    return make_benchmark_env("chain", n=5)


@pytest.fixture
def small_random_mdp():
    return make_benchmark_env("random_mdp", n_states=6, n_actions=3, gamma=0.9, seed=3)


@pytest.fixture
def two_outcome_mdp():
    """One action from s0 lands uniformly in s1 or s2; s1, s2 absorb."""
    P = np.zeros((3, 1, 3))
    P[0, 0, 1] = P[0, 0, 2] = 0.5
    P[1, 0, 1] = 1.0
    P[2, 0, 2] = 1.0
    return make_tabular_mdp(3, 1, P, np.zeros((3, 1)), gamma=0.5)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines after the test run."""
    mod = next((m for name, m in list(sys.modules.items()) if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
