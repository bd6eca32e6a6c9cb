import time
from contextlib import contextmanager

import numpy as np
import pytest


def numerical_grad(f, x, h=1e-5, max_entries=None, rng=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    With ``max_entries`` only a random subset of positions is probed; the
    returned array holds NaN elsewhere.
    """
    grad = np.full(x.shape, np.nan)
    positions = list(np.ndindex(x.shape))
    if max_entries is not None and len(positions) > max_entries:
        rng = rng or np.random.default_rng(0)
        positions = [positions[i] for i in rng.choice(len(positions), max_entries, replace=False)]
    for pos in positions:
        old = x[pos]
        x[pos] = old + h
        fp = f()
        x[pos] = old - h
        fm = f()
        x[pos] = old
        grad[pos] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric):
    mask = ~np.isnan(numeric)
    a, n = analytic[mask], numeric[mask]
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES = []


@contextmanager
def _criterion(number, title, limit_s=None):
    """Time a criterion body and record one PASS/FAIL line for the session summary."""
    note = {}
    t0 = time.perf_counter()
    ok = False
    try:
        yield note
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        in_time = limit_s is None or elapsed < limit_s
        status = "PASS" if ok and in_time else "FAIL"
        limit = f", limit {limit_s:g} s" if limit_s is not None else ""
        extra = f" [{note['detail']}]" if "detail" in note else ""
        line = f"criterion {number} {status}: {title}{extra} ({elapsed:.1f} s{limit})"
        _ACCEPTANCE_LINES.append(line)
        print(line)
    assert in_time, f"criterion {number} took {elapsed:.1f} s, limit {limit_s} s"


@pytest.fixture
def criterion():
    return _criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
