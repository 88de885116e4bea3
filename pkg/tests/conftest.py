import numpy as np
import pytest

from retrieval_lab import diffcore as dc


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (float64)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor for near-zero entries."""
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def check_grad(build, *arrays, h=1e-5):
    """``build(*tensors) -> scalar Tensor``; returns max relative error over all inputs."""
    leaves = [dc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*leaves).backward()
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [dc.Tensor(v if j == k else arrays[j]) for j in range(len(arrays))]
            return build(*args).item()
        worst = max(worst, rel_err(leaves[k].grad, numeric_grad(f, a.copy(), h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------- acceptance report
_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """``criterion(n, title, passed, detail)`` records one acceptance line."""
    def record(n: int, title: str, passed: bool, detail: str = "") -> bool:
        _ACCEPTANCE[n] = (title, bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[n]
        tr.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
