import numpy as np
import pytest

from neurossm import tensor as tt


@pytest.fixture(autouse=True)
def _checked_mode():
    with tt.checked(True):
        yield


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    out = np.zeros_like(arr)
    flat = arr.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return out


def rel_err(auto: np.ndarray, fd: np.ndarray) -> float:
    return float(np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(auto))))


# one PASS/FAIL line per acceptance criterion, printed after the run
_verdicts: dict[str, tuple[str, bool, str]] = {}


@pytest.fixture
def verdict(request):
    def record(label, ok, detail=""):
        _verdicts[request.node.nodeid] = (label, bool(ok), detail)
        assert ok, f"{label}: {detail}"
    return record


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    if report.nodeid not in _verdicts:
        _verdicts[report.nodeid] = (report.nodeid.split("::")[-1], report.passed, "raised before a verdict")
    elif report.failed and _verdicts[report.nodeid][1]:
        label, _, detail = _verdicts[report.nodeid]
        _verdicts[report.nodeid] = (label, False, detail + " (later assertion failed)")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in _verdicts.values():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  [{detail}]")
