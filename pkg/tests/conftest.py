import numpy as np
import pytest

from rmtunc.manipulator import ChainSpec, quintic_line_task
from rmtunc.specfun import RngStream


@pytest.fixture(scope="session")
def chain():
    return ChainSpec()


@pytest.fixture(scope="session")
def task(chain):
    return quintic_line_task(chain=chain)


@pytest.fixture
def rng():
    return RngStream(1234)


def rel_fro(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(b))


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line; printed in the terminal summary whatever the outcome."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
