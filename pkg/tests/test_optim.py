import math

import numpy as np
import pytest

from faultformer.optim import LrSchedule, MissingGradError, OptimizerState, adamw_step, onecycle_lr
from faultformer.tensor import Tensor


def scalar_param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_first_step_is_normalized_gradient():
    lr, eps, g = 1e-3, 1e-8, 0.37
    p = scalar_param(2.0, g)
    adamw_step({"w": p}, OptimizerState(lr=lr, eps=eps, weight_decay=0.0))
    assert p.data[0] == pytest.approx(2.0 - lr * g / (abs(g) + eps), abs=1e-15)


def test_zero_gradient_leaves_parameter():
    p = scalar_param(1.5, 0.0)
    adamw_step({"w": p}, OptimizerState(weight_decay=0.0))
    assert p.data[0] == 1.5


def test_decoupled_weight_decay():
    p = scalar_param(2.0, 0.0)
    adamw_step({"w": p}, OptimizerState(lr=0.1, weight_decay=0.5))
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_descent_on_quadratic():
    w = Tensor(np.array([3.0]), requires_grad=True)
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    prev = abs(w.data[0])
    for _ in range(10):
        w.grad = 2 * w.data
        adamw_step({"w": w}, state)
        assert abs(w.data[0]) < prev
        prev = abs(w.data[0])


def test_matches_hand_rolled_adamw(rng):
    """Three steps against a direct transcription of the update rule."""
    x = rng.standard_normal(5)
    grads = [rng.standard_normal(5) for _ in range(3)]
    lr, b1, b2, eps, wd = 0.01, 0.9, 0.98, 1e-8, 0.01
    w = Tensor(x.copy(), requires_grad=True)
    state = OptimizerState(lr=lr, weight_decay=wd)
    ref, m, v = x.copy(), np.zeros(5), np.zeros(5)
    for t, g in enumerate(grads, start=1):
        w.grad = g
        adamw_step({"w": w}, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g ** 2
        ref = ref - lr * wd * ref
        ref = ref - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(w.data, ref, rtol=1e-14)


def test_missing_gradient_is_an_error():
    with pytest.raises(MissingGradError, match="w"):
        adamw_step({"w": Tensor(np.zeros(2), requires_grad=True)}, OptimizerState())


def test_onecycle_reference_values():
    s = LrSchedule(warmup_steps=100, min_lr=1e-4, max_lr=1e-3, total_steps=1000)
    assert onecycle_lr(0, s) == pytest.approx(1e-4, abs=1e-18)
    assert onecycle_lr(100, s) == pytest.approx(1e-3, abs=1e-18)
    assert onecycle_lr(550, s) == pytest.approx(5.5e-4, abs=1e-12)
    assert onecycle_lr(5000, s) == 1e-4


def test_onecycle_shape():
    s = LrSchedule(warmup_steps=10, total_steps=60)
    lrs = [onecycle_lr(k, s) for k in range(61)]
    assert all(a < b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a >= b for a, b in zip(lrs[10:60], lrs[11:61]))
    # cosine decay against the closed form
    k = 35
    assert lrs[k] == pytest.approx(1e-4 + 0.45e-3 * (1 + math.cos(math.pi * 25 / 50)), abs=1e-15)


def test_fitted_schedule_shrinks_warmup():
    s = LrSchedule.fitted(40, warmup_steps=100)
    assert s.warmup_steps == 39 and s.total_steps == 40


@pytest.mark.parametrize("kwargs", [dict(min_lr=0.0), dict(min_lr=2e-3), dict(warmup_steps=0),
                                    dict(warmup_steps=1000)])
def test_schedule_validation(kwargs):
    with pytest.raises(ValueError):
        LrSchedule(**kwargs)
