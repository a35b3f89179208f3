import numpy as np
import pytest

from vcl_lab import autodiff as ad


def fd_errors(fn, *arrays, h=1e-6):
    """Relative error of tape gradients vs central differences, one per input.

    ``fn`` maps Tensors to a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    ad.backward(fn(*ts))
    errs = []
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [ad.Tensor(x if j == i else arrays[j]) for j in range(len(arrays))]
            return fn(*args).item()

        num = ad.numerical_grad(f, a, h=h)
        errs.append(ad.grad_rel_error(ts[i].grad, num))
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Print and keep one PASS/FAIL line for an acceptance criterion."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
