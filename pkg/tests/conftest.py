import numpy as np
import pytest

from metalab.tabular_mdp import TabularMdp


def random_mdp(rng, n_states=5, n_actions=3, gamma=0.9, q_max=1.0):
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    r = rng.uniform(-q_max, q_max, size=(n_states, n_actions))
    zeta = rng.dirichlet(np.ones(n_states)) * 0.9 + 0.1 / n_states
    return TabularMdp(p, r, gamma, zeta / zeta.sum(), q_max)


def random_policy(rng, n_states, n_actions):
    return rng.dirichlet(np.ones(n_actions), size=n_states)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
