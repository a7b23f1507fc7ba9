import math
import time

import numpy as np
import pytest

from obbkit.geometry import OrientedBox

_CRITERIA = []
_START = time.perf_counter()
SUITE_BUDGET_S = 600


@pytest.fixture
def criterion():
    """Record a named acceptance criterion's outcome for the terminal summary."""
    def record(name, passed, detail=""):
        _CRITERIA.append((name, bool(passed), detail))
        assert passed, f"{name}: {detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")
    elapsed = time.perf_counter() - _START
    ok = elapsed < SUITE_BUDGET_S
    terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] suite runtime  {elapsed:.0f}s (budget {SUITE_BUDGET_S}s)")


def random_box(rng, extent=20.0, min_side=0.5, max_side=12.0):
    return OrientedBox(
        float(rng.uniform(-extent, extent) / 4),
        float(rng.uniform(-extent, extent) / 4),
        float(rng.uniform(min_side, max_side)),
        float(rng.uniform(min_side, max_side)),
        float(rng.uniform(-math.pi, math.pi)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
