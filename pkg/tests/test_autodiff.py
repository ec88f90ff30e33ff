"""Gradient engine: hand values, the finite-difference oracle, and the
reverse-mode/oracle agreement contract."""

import numpy as np
import pytest

from advopt import engine
from advopt.engine import backward, constant, finite_diff_grad, variable
from advopt.errors import NonFiniteError, ShapeMismatchError
from advopt.models import (CrossEntropy, KLToReference, forward, value_and_grad_input,
                           value_and_grad_params)

from conftest import make_weights, rel_err


# ---------------------------------------------------------------------------
# the oracle itself
# ---------------------------------------------------------------------------


def test_finite_diff_square():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-8


def test_finite_diff_constant():
    g = finite_diff_grad(lambda x: 7.5, np.array([1.0, -2.0, 0.3]))
    assert np.all(g == 0.0)


def test_finite_diff_tanh_at_zero():
    g = finite_diff_grad(lambda x: float(np.tanh(x[0])), np.array([0.0]))
    assert abs(g[0] - 1.0) < 1e-8


def test_finite_diff_rejects_nonfinite():
    def bad(x):
        return float("nan")

    with pytest.raises(NonFiniteError):
        finite_diff_grad(bad, np.array([1.0]))


# ---------------------------------------------------------------------------
# hand-checked values
# ---------------------------------------------------------------------------


def test_symmetric_logits_cross_entropy_grad(identity_spec):
    weights = make_weights(identity_spec)
    x = np.zeros((1, 2, 1, 1))
    bundle = value_and_grad_input(weights, CrossEntropy(np.array([0])), x)
    assert bundle.loss == pytest.approx(np.log(2.0))
    assert bundle.grads["x"].reshape(2) == pytest.approx([-0.5, 0.5])


def test_kl_at_exact_match_is_zero(tiny_conv_spec):
    weights = make_weights(tiny_conv_spec, seed=3)
    x = np.random.default_rng(0).uniform(0, 1, (2, 1, 8, 8))
    ref = forward(weights, x)
    bundle = value_and_grad_input(weights, KLToReference(ref), x)
    assert bundle.loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(bundle.grads["x"]).max() == pytest.approx(0.0, abs=1e-12)


def test_linear_times_input_squared_loss():
    # L = (w * x)^2 with x = 1, w = 2  ->  dL/dw = 2 w x^2 = 4
    w = variable(np.array(2.0))
    x = constant(np.array(1.0))
    wx = engine.mul(w, x)
    loss = engine.mul(wx, wx)
    (gw,) = backward(loss, [w])
    assert float(gw) == pytest.approx(4.0)


def test_zero_input_gives_zero_weight_grads(tiny_dense_spec):
    # zero-bias net: every activation is zero, so all multiplicative weight
    # gradients vanish (bias gradients are exempt: they see the softmax error)
    weights = make_weights(tiny_dense_spec, seed=1)
    x = np.zeros((2, 1, 2, 3))
    bundle = value_and_grad_params(weights, CrossEntropy(np.array([0, 1])), x)
    for name, g in bundle.grads.items():
        if not name.endswith("_b"):
            assert np.abs(g).max() == pytest.approx(0.0, abs=1e-15), name


# ---------------------------------------------------------------------------
# reverse mode vs central differences
# ---------------------------------------------------------------------------


def test_input_grad_matches_oracle(tiny_conv_spec):
    weights = make_weights(tiny_conv_spec, seed=7)
    rng = np.random.default_rng(42)
    x = rng.uniform(0.1, 0.9, (2, 1, 8, 8))
    y = np.array([0, 2])
    bundle = value_and_grad_input(weights, CrossEntropy(y), x)

    def f(z):
        return float(engine.softmax_cross_entropy(
            constant(forward(weights, z)), y).value)

    oracle = finite_diff_grad(f, x)
    assert rel_err(bundle.grads["x"], oracle) <= 1e-5


def test_param_grad_matches_oracle(tiny_dense_spec):
    rng = np.random.default_rng(5)
    weights = make_weights(tiny_dense_spec, seed=11)
    x = rng.uniform(0, 1, (3, 1, 2, 3))
    y = np.array([1, 0, 3])
    bundle = value_and_grad_params(weights, CrossEntropy(y), x)
    for name in weights.tensors:
        def f(w, name=name):
            saved = weights.tensors[name]
            weights.tensors[name] = w
            try:
                return float(engine.softmax_cross_entropy(constant(forward(weights, x)), y).value)
            finally:
                weights.tensors[name] = saved

        oracle = finite_diff_grad(f, weights.tensors[name])
        assert rel_err(bundle.grads[name], oracle) <= 1e-5, name


def test_param_grad_matches_oracle_kl(tiny_conv_spec):
    rng = np.random.default_rng(15)
    weights = make_weights(tiny_conv_spec, seed=2)
    x = rng.uniform(0, 1, (2, 1, 8, 8))
    ref = forward(weights, x) + rng.normal(0, 0.5, (2, 3))
    bundle = value_and_grad_params(weights, KLToReference(ref), x)
    name = "conv0"

    def f(w):
        saved = weights.tensors[name]
        weights.tensors[name] = w
        try:
            return float(engine.kl_softmax(constant(ref), constant(forward(weights, x))).value)
        finally:
            weights.tensors[name] = saved

    oracle = finite_diff_grad(f, weights.tensors[name])
    assert rel_err(bundle.grads[name], oracle) <= 1e-5


def test_kl_reference_side_gradient_matches_oracle():
    rng = np.random.default_rng(8)
    ref0 = rng.normal(0, 1, (4, 5))
    q0 = rng.normal(0, 1, (4, 5))
    ref = variable(ref0)
    out = engine.kl_softmax(ref, constant(q0))
    (gr,) = backward(out, [ref])
    oracle = finite_diff_grad(lambda r: float(engine.kl_softmax(constant(r), constant(q0)).value), ref0)
    assert rel_err(gr, oracle) <= 1e-6


def test_margin_loss_gradient_matches_oracle():
    rng = np.random.default_rng(9)
    z0 = rng.normal(0, 1, (6, 4))
    y = np.array([0, 1, 2, 3, 1, 2])
    z = variable(z0)
    out = engine.cw_margin(z, y)
    (gz,) = backward(out, [z])
    oracle = finite_diff_grad(lambda w: float(engine.cw_margin(constant(w), y).value), z0)
    assert rel_err(gz, oracle) <= 1e-6


# ---------------------------------------------------------------------------
# structural contracts
# ---------------------------------------------------------------------------


def test_linearity_of_gradients():
    rng = np.random.default_rng(3)
    x0 = rng.normal(0, 1, (4,))
    a, b = 2.5, -1.25

    def build(xn):
        f = engine.mul(xn, xn)          # x^2 elementwise
        g = engine.tanh(xn)
        fs = engine.matmul(engine.reshape(f, (1, 4)), constant(np.ones((4, 1))))
        gs = engine.matmul(engine.reshape(g, (1, 4)), constant(np.ones((4, 1))))
        return engine.reshape(fs, ()), engine.reshape(gs, ())

    xn = variable(x0)
    f, g = build(xn)
    combo = engine.add(engine.mul(f, constant(a)), engine.mul(g, constant(b)))
    (g_combo,) = backward(combo, [xn])

    xn2 = variable(x0)
    f2, _ = build(xn2)
    (gf,) = backward(f2, [xn2])
    xn3 = variable(x0)
    _, g3 = build(xn3)
    (gg,) = backward(g3, [xn3])

    assert np.allclose(g_combo, a * gf + b * gg, rtol=0, atol=1e-15)


def test_clamp_subgradient_convention():
    x = variable(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]))
    out = engine.clamp(x, 0.0, 1.0)
    total = engine.matmul(engine.reshape(out, (1, 5)), constant(np.ones((5, 1))))
    (gx,) = backward(engine.reshape(total, ()), [x])
    # 1 strictly inside and on the boundary, 0 outside
    assert list(gx) == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_sign_is_constant_in_backward():
    x = variable(np.array([1.0, -2.0]))
    s = engine.sign(x)
    assert not s.requires
    assert list(s.value) == [1.0, -1.0]


def test_min_max_tie_breaking():
    a = variable(np.array([1.0, 2.0]))
    b = variable(np.array([1.0, 0.0]))
    mx = engine.maximum(a, b)
    total = engine.matmul(engine.reshape(mx, (1, 2)), constant(np.ones((2, 1))))
    ga, gb = backward(engine.reshape(total, ()), [a, b])
    assert list(ga) == [1.0, 1.0]  # tie goes to the first operand
    assert list(gb) == [0.0, 0.0]


def test_broadcast_gradients_match_oracle():
    rng = np.random.default_rng(12)
    a0 = rng.normal(0, 1, (3, 1))
    b0 = rng.normal(0, 1, (1, 4))

    def scalar_of(a, b):
        prod = engine.mul(a, b)
        s = engine.matmul(engine.matmul(constant(np.ones((1, 3))), prod), constant(np.ones((4, 1))))
        return engine.reshape(s, ())

    an, bn = variable(a0), variable(b0)
    ga, gb = backward(scalar_of(an, bn), [an, bn])
    oa = finite_diff_grad(lambda a: float(scalar_of(constant(a), constant(b0)).value), a0)
    ob = finite_diff_grad(lambda b: float(scalar_of(constant(a0), constant(b)).value), b0)
    assert rel_err(ga, oa) <= 1e-7 and rel_err(gb, ob) <= 1e-7


def test_deterministic_bitwise_gradients(tiny_conv_spec):
    weights = make_weights(tiny_conv_spec, seed=4)
    x = np.random.default_rng(1).uniform(0, 1, (2, 1, 8, 8))
    y = np.array([1, 2])
    b1 = value_and_grad_input(weights, CrossEntropy(y), x)
    b2 = value_and_grad_input(weights, CrossEntropy(y), x)
    assert b1.loss == b2.loss
    assert np.array_equal(b1.grads["x"], b2.grads["x"])
    p1 = value_and_grad_params(weights, CrossEntropy(y), x)
    p2 = value_and_grad_params(weights, CrossEntropy(y), x)
    for name in p1.grads:
        assert np.array_equal(p1.grads[name], p2.grads[name])


def test_shared_node_gradient_accumulates():
    x = variable(np.array(3.0))
    out = engine.add(engine.mul(x, x), x)  # x^2 + x -> 2x + 1 = 7
    (gx,) = backward(out, [x])
    assert float(gx) == pytest.approx(7.0)


def test_backward_requires_scalar_root():
    x = variable(np.ones(3))
    with pytest.raises(ShapeMismatchError):
        backward(engine.mul(x, x), [x])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        engine.matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))


def test_label_out_of_range():
    with pytest.raises(ShapeMismatchError):
        engine.softmax_cross_entropy(constant(np.zeros((1, 3))), np.array([3]))


def test_nonfinite_loss_surfaces(identity_spec):
    weights = make_weights(identity_spec)
    x = np.full((1, 2, 1, 1), np.nan)
    with pytest.raises(NonFiniteError):
        value_and_grad_input(weights, CrossEntropy(np.array([0])), x)
