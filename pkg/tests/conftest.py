import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from noduledet.tensor import Tensor, backward  # noqa: E402


def numeric_grad(fn, arrays, index, eps=1e-6):
    """Central differences of scalar ``fn(*arrays)`` with respect to ``arrays[index]``."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index])
    it = np.nditer(base[index], flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = base[index][i]
        base[index][i] = orig + eps
        up = fn(*base)
        base[index][i] = orig - eps
        down = fn(*base)
        base[index][i] = orig
        grad[i] = (up - down) / (2 * eps)
    return grad


def max_rel_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradient_check(build, arrays, eps=1e-6, floor=1e-8):
    """Worst relative error between autodiff and central differences over all inputs.

    ``build(*tensors)`` must return a scalar Tensor.  A fixed random
    projection is not needed because ``build`` already reduces to a scalar.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(build(*tensors))

    def value(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for k, t in enumerate(tensors):
        num = numeric_grad(value, arrays, k, eps)
        worst = max(worst, max_rel_error(t.grad, num, floor))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
