import numpy as np
import pytest

from stoq.model import BathSpec, TimeGrid, build_two_level_scenario, discrete_spectrum, ohmic_spectrum
from stoq.oracle import BathModeSet, modes_to_spectrum


def single_mode_scenario(g=1.0, c=0.1, T=1.0, axis="x", n_steps=200, dt=0.05, n_max=24, initial=None):
    b = BathModeSet(((1.0, c, n_max),))
    s = build_two_level_scenario(
        1.0, axis, g, BathSpec(T, modes_to_spectrum(b, T)), TimeGrid(0.0, dt, n_steps), initial=initial
    )
    return s, b


def ohmic_two_level(eta=0.05, T=1.0, axis="x", n_steps=200, dt=0.05, g=1.0, initial=None, omega_c=1.0):
    return build_two_level_scenario(
        1.0, axis, g, BathSpec(T, ohmic_spectrum(eta, omega_c)), TimeGrid(0.0, dt, n_steps), initial=initial
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def qubit_mode():
    return single_mode_scenario()


@pytest.fixture
def zero_spectrum():
    return discrete_spectrum([1.0], [[[0.0]]])


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
