import numpy as np
import pytest

from irfield._accel import NUMBA_AVAILABLE, backend

BACKENDS = [pytest.param(True, id="numba", marks=pytest.mark.skipif(not NUMBA_AVAILABLE,
                                                                     reason="numba missing")),
            pytest.param(False, id="numpy")]


@pytest.fixture(params=BACKENDS)
def any_backend(request):
    """Run the test once per kernel backend."""
    with backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def report(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
