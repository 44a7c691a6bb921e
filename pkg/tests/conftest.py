import numpy as np
import pytest
from hypothesis import settings

from cetal.tensor import Tensor, backward

from oracles import numeric_grad

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def gradcheck(fn, tensors, h=1e-5, max_entries=None, seed=0):
    """Worst norm-wise relative error between autodiff and central differences.

    ``fn()`` returns a scalar Tensor built from ``tensors`` (64-bit, requiring
    grad). With ``max_entries`` only that many random entries per tensor are
    probed.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = fn()
    backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        n = t.data.size
        idx = None
        if max_entries is not None and n > max_entries:
            idx = rng.choice(n, size=max_entries, replace=False)
        num = numeric_grad(lambda: float(fn().data), t.data, h, idx)
        keys = sorted(num)
        a = analytic.reshape(-1)[keys]
        b = np.array([num[k] for k in keys])
        denom = np.linalg.norm(a) + np.linalg.norm(b)
        err = 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
        worst = max(worst, err)
    return worst


def param(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
