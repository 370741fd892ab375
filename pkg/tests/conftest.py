import numpy as np
import pytest
import torch
from hypothesis import settings

from kdpinn.jets import DTYPE

settings.register_profile("kdpinn", deadline=None, max_examples=40)
settings.load_profile("kdpinn")


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def fd_grad_hess(f, x, h=1e-4):
    """Central-difference gradient and Hessian of a scalar function of a 1-D array."""
    x = np.asarray(x, dtype=float)
    d = x.size
    g = np.zeros(d)
    H = np.zeros((d, d))
    f0 = f(x)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
        H[i, i] = (f(x + e) - 2 * f0 + f(x - e)) / h**2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            H[i, j] = H[j, i] = (f(x + e + ej) - f(x + e - ej) - f(x - e + ej) + f(x - e - ej)) / (4 * h * h)
    return g, H


@pytest.fixture
def t64():
    def make(a):
        return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)
    return make


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
