import numpy as np
import pytest

from rotorrelax.dynamics import ModelParams, State
from rotorrelax.lyapunov import LyapunovParams
from rotorrelax.potential import PeriodicPotential


@pytest.fixture
def params():
    return ModelParams()


@pytest.fixture
def lyap():
    return LyapunovParams()


@pytest.fixture
def rich_params():
    # several modes, both parities, non-unit gamma and T
    pot = PeriodicPotential((-1.0, 0.3, 0.0, 0.1), (0.2, -0.15))
    return ModelParams(gamma=0.7, temperature=1.3, potential=pot)


def random_states(rng, n, scale=5.0):
    q = rng.uniform(0, 2 * np.pi, (2, n))
    p = rng.normal(0, scale, (2, n))
    return State(q[0], q[1], p[0], p[1])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[-1])):
            terminalreporter.write_line(line)
