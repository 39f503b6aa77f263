import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def stripes(width, height, theta, period=8.0, phase=0.0):
    """Sinusoidal ridges running along ``theta`` (x right, y down), values in [0, 255]."""
    yy, xx = np.mgrid[0:height, 0:width].astype(float)
    across = -xx * np.sin(theta) + yy * np.cos(theta)
    return 127.5 + 127.5 * np.cos(2 * np.pi * across / period + phase)


CRITERIA = {}


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line; the summary prints all of them."""
    def record(n, ok, detail):
        CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
