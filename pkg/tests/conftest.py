import numpy as np
import pytest

from online_adp.models import m1_kernel, m2_kernel, static_sequence

from scenarios import r5_kernel, sinusoidal


@pytest.fixture
def m1():
    return static_sequence(*m1_kernel(), horizon=4)


@pytest.fixture
def m2():
    return static_sequence(*m2_kernel(), horizon=4)


@pytest.fixture
def m2_drift():
    return sinusoidal(m2_kernel(), 60)


@pytest.fixture
def r5_drift():
    return sinusoidal(r5_kernel(), 200)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def acceptance_log(request):
    """Record one summary line per acceptance criterion."""
    lines = request.config.stash[_LINES_KEY]

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
