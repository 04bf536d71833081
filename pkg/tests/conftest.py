import numpy as np
import pytest

from vmseg import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with T.default_dtype(np.float64):
        yield


def leaf(rng, *shape, scale=1.0, positive=False):
    a = rng.normal(size=shape) * scale
    if positive:
        a = np.abs(a) + 0.1
    return T.Tensor(a, requires_grad=True, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, with the measured values."""
    rows = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when == "call" and "test_acceptance.py::test_criterion_" in rep.nodeid:
                rows.append((rep.nodeid.split("::")[-1], rep.outcome, dict(rep.user_properties)))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, props in sorted(rows):
        n = int(name.split("_")[2])
        detail = ", ".join(f"{k}={v}" for k, v in props.items())
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if outcome == 'passed' else 'FAIL'}  {detail}")
