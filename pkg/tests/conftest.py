import numpy as np
import pytest

from faultformer.tensor import Tensor


def numeric_grad(f, t: Tensor, idx, h: float = 1e-4) -> float:
    old = t.data[idx]
    t.data[idx] = old + h
    up = float(f().data)
    t.data[idx] = old - h
    down = float(f().data)
    t.data[idx] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(f, tensors, rng, n_per_tensor: int = 8, h: float = 1e-4):
    """Largest relative error between backprop and central differences over
    ``n_per_tensor`` random entries of each tensor. ``f`` returns a scalar Tensor.
    """
    for t in tensors:
        t.grad = None
    f().backward()
    worst, checked = 0.0, 0
    for t in tensors:
        analytic = t.grad.copy()
        flat = rng.choice(t.data.size, size=min(n_per_tensor, t.data.size), replace=False)
        for k in flat:
            idx = np.unravel_index(k, t.data.shape)
            worst = max(worst, rel_err(numeric_grad(f, t, idx, h), analytic[idx]))
            checked += 1
    return worst, checked


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
