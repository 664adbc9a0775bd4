import math

import numpy as np
import pytest

from offsite.tensor import LrSchedule, OptimizerError, OptimizerState, Tensor, adamw_step, cosine_lr


def test_schedule_values():
    s = LrSchedule(lr_max=1.0, lr_min=0.1, total_steps=10, warmup_steps=2)
    assert cosine_lr(s, 0) == 0.0
    assert cosine_lr(s, 1) == 0.5
    assert cosine_lr(s, 2) == 1.0
    assert cosine_lr(s, 6) == pytest.approx(0.55)  # halfway through the decay
    assert cosine_lr(s, 10) == pytest.approx(0.1)
    lrs = [cosine_lr(s, t) for t in range(2, 11)]
    assert lrs == sorted(lrs, reverse=True)


def test_schedule_without_warmup_starts_at_peak():
    s = LrSchedule(lr_max=3e-4, total_steps=5)
    assert cosine_lr(s, 0) == 3e-4 and cosine_lr(s, 5) == pytest.approx(0.0)
    # warmup spanning the whole run: the end-of-schedule value wins at the last step
    assert cosine_lr(LrSchedule(1.0, total_steps=3, warmup_steps=3), 3) == 0.0


@pytest.mark.parametrize("kw", [dict(total_steps=0), dict(warmup_steps=20), dict(lr_min=2.0)])
def test_schedule_rejects_bad_settings(kw):
    with pytest.raises(ValueError):
        LrSchedule(**{"lr_max": 1.0, "total_steps": 10, **kw})


def test_schedule_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        cosine_lr(LrSchedule(1.0, total_steps=4), 5)


def test_first_step_moves_each_weight_by_lr():
    # after bias correction the first Adam step is lr * sign(g), plus decoupled decay
    p = Tensor(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -0.1, 4.0])
    adamw_step({"p": p}, OptimizerState(weight_decay=0.1), lr=0.01)
    expect = np.array([1.0, -2.0, 3.0]) * (1 - 0.01 * 0.1) - 0.01 * np.sign([0.5, -0.1, 4.0])
    np.testing.assert_allclose(p.data, expect, rtol=1e-6)


def test_parameters_without_grad_are_skipped():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    a.grad = np.ones(2)
    state = OptimizerState()
    adamw_step({"a": a, "b": b}, state, lr=0.1)
    assert np.all(b.data == 1.0) and "b" not in state.exp_avg and state.step == 1


def test_optimizer_errors():
    p = Tensor(np.ones(2))
    with pytest.raises(OptimizerError):
        adamw_step({"p": p}, OptimizerState(), lr=-1.0)
    p.grad = np.ones(3)
    with pytest.raises(OptimizerError):
        adamw_step({"p": p}, OptimizerState(), lr=0.1)
    p.grad = np.array([1.0, math.nan])
    with pytest.raises(OptimizerError):
        adamw_step({"p": p}, OptimizerState(), lr=0.1)
    assert np.all(p.data == 1.0)
