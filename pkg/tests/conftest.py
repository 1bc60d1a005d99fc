import numpy as np
import pytest

from blockcg.problems import random_spd
from blockcg.sparse import make_rng


@pytest.fixture
def rng():
    return make_rng(12345)


@pytest.fixture(scope="session")
def spd100():
    return random_spd(100, 1e4, seed=2, kind="linear")


@pytest.fixture(scope="session")
def spd60():
    return random_spd(60, 1e3, seed=9, kind="linear")


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record ``(criterion, ok, detail)``; lines are echoed in the summary."""

    def report(name, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
