from __future__ import annotations

import numpy as np
import pytest


def central_fd(f, x, h=1e-6):
    """Central finite differences of scalar f at flat x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria append (number, verdict, detail) here; printed after the run
CRITERIA: list = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(CRITERIA, key=lambda c: (c[0], c[2])):
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
