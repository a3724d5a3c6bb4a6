import numpy as np
import pytest

from netrecast import ops
from netrecast.tensor import Tensor, backward


def numeric_grad(f, arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (modified in place)."""
    g = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def gradcheck(build, inputs: list[Tensor], rng: np.random.Generator, rtol: float = 1e-3, atol: float = 1e-6):
    """Compare analytic and numeric gradients of ``sum(build(*inputs) * G)`` for random G."""
    out = build(*inputs)
    weights = Tensor(rng.standard_normal(out.shape), dtype=np.float64)

    def loss():
        return ops.sum(ops.mul(build(*inputs), weights))

    for t in inputs:
        t.grad = None
    backward(loss())
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    def value():
        return float(loss().data)

    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        num = numeric_grad(value, t.data)
        assert a is not None, "missing analytic gradient"
        np.testing.assert_allclose(a, num, rtol=rtol, atol=atol)


def t64(rng, *shape, grad=True, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=grad, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance lines collected during the run and echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    def report(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
