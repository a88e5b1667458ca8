import time

import numpy as np
import pytest

from attnquant.model import AttentionBlock, CalibrationSet

_ACCEPTANCE = []
_START = time.perf_counter()
SUITE_BUDGET_S = 120.0


def make_block(rng, d, heads, causal=False):
    w = {n: rng.standard_normal((d, d)) / np.sqrt(d) for n in ("w_q", "w_k", "w_v", "w_out")}
    return AttentionBlock(heads=heads, causal=causal, **w)


def make_calib(rng, d, seq_len, n):
    return CalibrationSet(tuple(rng.standard_normal((d, seq_len)) for _ in range(n)))


def spd(rng, n, floor=0.5):
    m = rng.standard_normal((n, n))
    return m @ m.T / n + floor * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for a numbered acceptance criterion."""

    def record(label, passed, detail=""):
        _ACCEPTANCE.append((label, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for label, passed, detail in _ACCEPTANCE:
        tr.write_line(f"{'PASS' if passed else 'FAIL'}  {label}  {detail}")
    elapsed = time.perf_counter() - _START
    ok = elapsed < SUITE_BUDGET_S
    tr.write_line(
        f"{'PASS' if ok else 'FAIL'}  10c full suite runtime  {elapsed:.1f} s (budget {SUITE_BUDGET_S:.0f} s)"
    )
