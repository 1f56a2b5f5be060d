import numpy as np
import pytest

from dana.tensor import Parameter, Tape, Tensor, finite_diff_grad


def check_grad(build, shapes, rng, weight=True, tol=1e-4, h=1e-4):
    """Compare tape gradients of ``sum(W * build(tape, *inputs))`` with central differences.

    ``build`` maps a tape and parameters to an output tensor; a fixed random
    weighting makes the upstream gradient non-uniform.
    """
    values = [rng.uniform(-1, 1, size=s) for s in shapes]
    tape = Tape()
    params = [Parameter(v.copy()) for v in values]
    out = build(tape, *params)
    w = rng.uniform(-1, 1, size=out.shape) if weight else np.ones(out.shape)
    tape.backward(tape.sum(tape.row_dot(out, Tensor(w))))
    for i, p in enumerate(params):

        def f(x, i=i):
            vs = [Parameter(v.copy()) for v in values]
            vs[i] = Parameter(x)
            return float(np.sum(w * build(Tape(enabled=False), *vs).value))

        fd = finite_diff_grad(f, values[i], h=h)
        err = np.max(np.abs(p.grad - fd) / np.maximum(1.0, np.abs(p.grad))) if fd.size else 0.0
        assert err < tol, f"input {i}: relative error {err:.2e}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
