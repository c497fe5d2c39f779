"""Autodiff engine: op gradients, graph traversal, numeric guards."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lca import engine as eng
from lca.engine import EngineError, NonFiniteError, Tensor

from helpers import fd_check


def test_sum_gradient_is_ones():
    x = eng.parameter([1.0, 2.0, 3.0])
    eng.backward(eng.sum_(x))
    assert np.array_equal(x.grad, [1, 1, 1])


def test_square_sum_gradient():
    x = eng.parameter([2.0, 0.0, -1.0])
    eng.backward(eng.sum_(x * x))
    assert np.allclose(x.grad, [4, 0, -2])


def test_backward_rejects_non_scalar():
    x = eng.parameter([1.0, 2.0])
    with pytest.raises(EngineError):
        eng.backward(x * x)


def test_unreachable_parameter_gets_zero_gradient():
    x = eng.parameter([1.0, 2.0])
    y = eng.parameter([3.0])
    grads = eng.gradients(eng.sum_(x * x), [x, y])
    assert np.array_equal(grads[id(y)], [0.0])
    assert np.allclose(grads[id(x)], [2.0, 4.0])


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError):
        eng.log(Tensor([0.0])) * 0.0 + eng.exp(Tensor([1000.0]))


def test_finite_checks_can_be_disabled():
    with eng.finite_checks(False):
        t = eng.exp(Tensor([2000.0]))
        assert np.isinf(t.data).all()


def test_precision_context_switches_dtype():
    assert Tensor([1.0]).data.dtype == np.float32
    with eng.precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


@pytest.mark.parametrize("op", [
    eng.exp, eng.log, eng.sqrt, eng.tanh, eng.sigmoid, eng.gelu,
    lambda x: eng.leaky_relu(x, 0.02), eng.abs_,
    lambda x: eng.maximum(x, 0.7), lambda x: eng.minimum(x, 1.3),
    lambda x: eng.softmax(x, axis=-1),
    lambda x: x ** 2.3, lambda x: x * 2.0 - 1.0,
])
def test_unary_op_gradients_match_fd(op):
    rng = np.random.default_rng(hash(repr(op)) % 2**32)
    with eng.precision("float64"):
        x = eng.parameter(rng.uniform(0.3, 1.7, (4, 5)))
        fd_check(lambda: eng.sum_(op(x) * op(x)), [x], rng, probes_per_param=6)


def test_matmul_broadcast_getitem_gradients():
    rng = np.random.default_rng(0)
    with eng.precision("float64"):
        a = eng.parameter(rng.normal(0, 1, (3, 4, 5)))
        b = eng.parameter(rng.normal(0, 1, (5, 2)))
        c = eng.parameter(rng.normal(0, 1, (2,)))

        def loss():
            y = eng.matmul(a, b) + c
            y = y[:, 1:3]
            return eng.sum_(y * y)

        fd_check(loss, [a, b, c], rng, probes_per_param=5)


def test_layer_norm_and_stack_gradients():
    rng = np.random.default_rng(1)
    with eng.precision("float64"):
        x = eng.parameter(rng.normal(0, 2, (6, 8)))
        g = eng.parameter(rng.uniform(0.5, 1.5, 8))
        b = eng.parameter(rng.normal(0, 0.1, 8))

        def loss():
            y = eng.layer_norm(x, g, b)
            z = eng.stack([y, y * 2.0], axis=0)
            return eng.sum_(eng.tanh(z))

        fd_check(loss, [x, g, b], rng, probes_per_param=5)


def test_fancy_index_gradient_accumulates():
    x = eng.parameter([1.0, 2.0, 3.0])
    idx = np.array([0, 0, 2])
    eng.backward(eng.sum_(x[idx]))
    assert np.array_equal(x.grad, [2.0, 0.0, 1.0])


def test_concat_gradient_splits():
    a = eng.parameter([1.0, 2.0])
    b = eng.parameter([3.0])
    eng.backward(eng.sum_(eng.concat([a, b]) * Tensor([1.0, 2.0, 3.0])))
    assert np.array_equal(a.grad, [1.0, 2.0])
    assert np.array_equal(b.grad, [3.0])


@given(st.lists(st.floats(min_value=-3, max_value=3), min_size=2, max_size=8))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one(vals):
    s = eng.softmax(Tensor(np.array(vals)), axis=-1)
    assert abs(float(s.data.sum()) - 1.0) < 1e-5


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=15, deadline=None)
def test_mean_matches_sum_over_count(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(0, 1, (3, 4)))
    assert np.allclose(eng.mean(x, axis=0).data, eng.sum_(x, axis=0).data / 3,
                       atol=1e-6)


def test_gradient_accumulates_across_backward_calls():
    x = eng.parameter([1.0])
    eng.backward(eng.sum_(x * 2.0))
    eng.backward(eng.sum_(x * 3.0))
    assert np.allclose(x.grad, [5.0])
    eng.zero_grads([x])
    assert x.grad is None
