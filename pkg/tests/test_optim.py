import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kernelga.errors import ConfigError, NumericError, ShapeError
from kernelga.optim import RMSProp, RMSPropConfig, decay_learning_rate, epochs_to_floor, rmsprop_step


def scalar_reference(w, grads, lr, beta, eps):
    """Plain-float RMSProp, one line per update rule."""
    e = 0.0
    out = []
    for g in grads:
        e = beta * e + (1 - beta) * g * g
        w = w - lr * g / (math.sqrt(e) + eps)
        out.append(w)
    return out


def test_first_step_example():
    opt = RMSProp(RMSPropConfig(lr=0.001, beta=0.9, epsilon=0.0))
    w = {"w": np.array([0.0])}
    opt.step(w, {"w": np.array([2.0])})
    assert opt.sq_avg["w"][0] == pytest.approx(0.4, abs=1e-15)
    assert -w["w"][0] == pytest.approx(0.001 * 2 / math.sqrt(0.4), abs=1e-15)
    assert -w["w"][0] == pytest.approx(0.0031623, abs=1e-7)


def test_zero_gradient_decays_accumulator():
    opt = RMSProp()
    w = {"w": np.array([1.0, -2.0])}
    opt.step(w, {"w": np.array([1.0, 1.0])})
    acc, before = opt.sq_avg["w"].copy(), w["w"].copy()
    opt.step(w, {"w": np.zeros(2)})
    np.testing.assert_allclose(opt.sq_avg["w"], 0.9 * acc)
    np.testing.assert_array_equal(w["w"], before)


def test_matches_scalar_reference_20_steps():
    rng = np.random.default_rng(0)
    grads = rng.standard_normal(20)
    cfg = RMSPropConfig()
    opt, w = RMSProp(cfg), {"w": np.array([0.3])}
    ours = []
    for g in grads:
        rmsprop_step(w, {"w": np.array([g])}, opt)
        ours.append(w["w"][0])
    ref = scalar_reference(0.3, grads, cfg.lr, cfg.beta, cfg.epsilon)
    assert max(abs(a - b) for a, b in zip(ours, ref)) < 1e-12


def test_constant_gradient_step_tends_to_lr():
    opt, w = RMSProp(RMSPropConfig(epsilon=0.0)), {"w": np.array([0.0])}
    prev = 0.0
    for _ in range(200):
        opt.step(w, {"w": np.array([3.0])})
        step, prev = prev - w["w"][0], w["w"][0]
    assert step == pytest.approx(0.001, rel=1e-6)


def test_shape_and_finiteness_errors():
    opt = RMSProp()
    with pytest.raises(ShapeError):
        opt.step({"w": np.zeros(3)}, {"w": np.zeros(2)})
    with pytest.raises(NumericError, match="conv1.W"):
        opt.step({"conv1.W": np.zeros(2)}, {"conv1.W": np.array([1.0, np.nan])})


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50))
@settings(max_examples=100, deadline=None)
def test_accumulator_nonnegative(grads):
    opt, w = RMSProp(), {"w": np.zeros(1)}
    for g in grads:
        opt.step(w, {"w": np.array([g])})
        assert opt.sq_avg["w"][0] >= 0


def test_quadratic_bowl():
    # at lr=1e-3 each step moves each coordinate by about lr, so 500 steps cannot
    # cover unit distance; a tenfold learning rate converges well inside the budget
    opt = RMSProp(RMSPropConfig(lr=0.01))
    w = {"w": np.array([0.6, 0.8])}
    for _ in range(500):
        opt.step(w, {"w": w["w"].copy()})
    assert 0.5 * np.sum(w["w"] ** 2) < 1e-3


def test_decay_examples():
    opt = RMSProp()
    decay_learning_rate(opt, 1)
    assert opt.lr == pytest.approx(0.00095, abs=1e-15)
    floor = RMSProp(RMSPropConfig(lr=1e-5))
    floor.decay_learning_rate()
    assert floor.lr == 1e-5


def test_decay_90_epochs_hits_floor():
    opt = RMSProp()
    lrs = [opt.decay_learning_rate(e) for e in range(1, 91)]
    assert lrs[-1] == 1e-5
    assert lrs[88] == pytest.approx(0.001 * 0.95 ** 89)
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert epochs_to_floor(RMSPropConfig()) == 90


def test_reset_restores_initial_lr():
    opt = RMSProp()
    opt.step({"w": np.ones(2)}, {"w": np.ones(2)})
    opt.decay_learning_rate()
    opt.reset()
    assert opt.lr == 0.001 and not opt.sq_avg


@pytest.mark.parametrize("kwargs", [dict(beta=1.0), dict(beta=0.0), dict(lr_floor=0.1), dict(lr_decay=1.0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        RMSPropConfig(**kwargs)
