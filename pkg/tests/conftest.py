import numpy as np
import pytest


def random_stable_lpc(rng, order, max_radius=0.95):
    """Random real predictor with all poles strictly inside the unit circle."""
    n_pairs = order // 2
    r = rng.uniform(0.1, max_radius, n_pairs)
    th = rng.uniform(0.05, np.pi - 0.05, n_pairs)
    poles = list(r * np.exp(1j * th)) + list(r * np.exp(-1j * th))
    if order % 2:
        poles.append(rng.uniform(-max_radius, max_radius))
    return np.real(np.poly(poles))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria record one line each; printed in the terminal summary
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
