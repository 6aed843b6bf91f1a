import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from axlstm.numcore import (
    GradCheckError, NonFiniteError, Rng, ShapeError, Tensor, abs, concat, debug_mode, default_dtype, exp,
    expand, gelu, grad_check, layer_norm, log, log_softmax, logsigmoid, matmul, maximum, mean, no_grad,
    reshape, reverse, sigmoid, silu, slice_axis, sqrt, swapaxes, transpose, where,
)
from axlstm.numcore import sum as tsum


def _rand(shape, seed=0, scale=1.0, shift=0.0):
    return np.random.default_rng(seed).normal(shift, scale, shape)


UNARY = {
    "exp": (exp, 0.0),
    "log": (lambda x: log(x), 3.0),  # shifted away from zero
    "sqrt": (sqrt, 3.0),
    "sigmoid": (sigmoid, 0.0),
    "logsigmoid": (logsigmoid, 0.0),
    "gelu": (gelu, 0.0),
    "silu": (silu, 0.0),
    "layer_norm": (layer_norm, 0.0),
    "log_softmax": (log_softmax, 0.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_grad(name):
    fn, shift = UNARY[name]
    x = Tensor(_rand((3, 5), seed=1, shift=shift))
    w = _rand((3, 5), seed=2)
    assert grad_check(lambda t: tsum(fn(t) * w), x) < 1e-6


def test_abs_grad_away_from_kink():
    x = Tensor(np.array([[-2.0, -0.5, 0.7, 3.0]]))
    assert grad_check(lambda t: tsum(abs(t) * np.arange(4.0)), x) < 1e-7


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div", "maximum"])
def test_binary_broadcast_grad(op):
    a = Tensor(_rand((4, 1, 3), seed=3))
    b = _rand((5, 3), seed=4) + (3.0 if op == "div" else 0.0)
    fns = {"add": lambda x, y: x + y, "sub": lambda x, y: x - y, "mul": lambda x, y: x * y,
           "div": lambda x, y: x / y, "maximum": maximum}
    w = _rand((4, 5, 3), seed=5)
    # gradient w.r.t. the broadcast operand and the other one
    assert grad_check(lambda t: tsum(fns[op](t, Tensor(b)) * w), a) < 1e-6
    assert grad_check(lambda t: tsum(fns[op](a, t) * w), Tensor(b)) < 1e-6


def test_matmul_batched_grad():
    a = Tensor(_rand((2, 3, 4), seed=6))
    b = Tensor(_rand((4, 5), seed=7))
    w = _rand((2, 3, 5), seed=8)
    assert grad_check(lambda t: tsum(matmul(t, b) * w), a) < 1e-6
    assert grad_check(lambda t: tsum(matmul(a, t) * w), b) < 1e-6


def test_shape_ops_grad():
    x = Tensor(_rand((2, 3, 4), seed=9))
    w = _rand((4, 3, 2), seed=10)
    assert grad_check(lambda t: tsum(transpose(reshape(t, (6, 4))) * w.reshape(4, 6)), x) < 1e-7
    assert grad_check(lambda t: tsum(swapaxes(t, 0, 2) * w), x) < 1e-7
    assert grad_check(lambda t: tsum(reverse(t, axis=1) * w.transpose(2, 1, 0)), x) < 1e-7
    assert grad_check(lambda t: tsum(slice_axis(t, 1, 3, axis=-1) * 2.0), x) < 1e-7
    assert grad_check(lambda t: tsum(concat([t, t * 2.0], axis=0) * np.ones((4, 3, 4))), x) < 1e-7
    assert grad_check(lambda t: tsum(expand(reshape(t, (1, 2, 3, 4)), (5, 2, 3, 4)) * 1.5), x) < 1e-7
    assert grad_check(lambda t: tsum(t[:, 1] * 3.0), x) < 1e-7


def test_where_routes_gradient():
    x = Tensor(_rand((3, 4), seed=11), requires_grad=True)
    cond = np.array([[True, False, True, False]] * 3)
    tsum(where(cond, x * 2.0, 0.0)).backward()
    assert np.array_equal(x.grad, np.where(cond, 2.0, 0.0))


def test_mean_and_sum_axes():
    x = Tensor(_rand((3, 4, 5), seed=12))
    assert grad_check(lambda t: tsum(mean(t, axis=(0, 2)) * np.arange(4.0)), x) < 1e-7
    assert grad_check(lambda t: tsum(tsum(t, axis=1, keepdims=True) * _rand((3, 1, 5), 13)), x) < 1e-7


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    tsum(x * 3.0).backward()
    tsum(x * 3.0).backward()
    assert np.allclose(x.grad, [6.0, 6.0])


def test_shared_subexpression_gradient():
    x = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    y = x * x
    tsum(y + y * 2.0).backward()  # d/dx 3 x^2
    assert np.allclose(x.grad, 6 * x.data)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_float32_default_and_float64_context():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert info.value.op == "matmul"
    assert "(2, 3)" in str(info.value) and "(4, 5)" in str(info.value)


def test_debug_mode_flags_non_finite():
    with debug_mode():
        with pytest.raises(NonFiniteError):
            log(Tensor(np.array([-1.0])))


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()


def test_grad_check_rejects_bad_eps_and_non_finite():
    with pytest.raises(ValueError):
        grad_check(lambda t: tsum(t), Tensor(np.ones(2)), eps=0.5)
    with pytest.raises(GradCheckError):
        grad_check(lambda t: tsum(log(t)), Tensor(np.array([1e-7, 1.0])), eps=1e-5)


def test_grad_check_detects_wrong_gradient():
    from axlstm.numcore import make_op

    def bad_square(t):
        return make_op("bad_square", t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    assert grad_check(lambda t: tsum(bad_square(t)), Tensor(np.array([1.0, 2.0]))) > 0.4


def test_logsigmoid_stable_for_large_inputs():
    out = logsigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(-1000.0) and out[2] == pytest.approx(0.0)


def test_gelu_known_values():
    # exact GELU: x * Phi(x)
    out = gelu(Tensor(np.array([0.0, 1.0, -1.0], dtype=np.float64))).data
    assert np.allclose(out, [0.0, 0.8413447460685429, -0.15865525393145707], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=2, max_side=6),
                  elements=st.floats(-50, 50, allow_nan=False)))
def test_layer_norm_rows_are_standardized(x):
    out = layer_norm(Tensor(x)).data
    spread = x.std(axis=-1)
    ok = spread > 1e-1  # rows with real variance normalize to mean 0, var 1
    assert np.allclose(out.mean(-1)[ok], 0.0, atol=1e-9)
    assert np.allclose(out.var(-1)[ok], 1.0, atol=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 16))
def test_broadcast_add_grad_sums_over_expanded_axes(shape, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, *shape)), requires_grad=True)
    b = Tensor(rng.normal(size=(1,) * len(shape)), requires_grad=True)
    tsum(a + b).backward()
    assert np.allclose(b.grad, a.size)
    assert np.allclose(a.grad, 1.0)


def test_rng_streams_are_reproducible_and_independent():
    a = Rng(5, "x").normal(4)
    assert np.array_equal(a, Rng(5, "x").normal(4))
    assert not np.array_equal(a, Rng(5, "y").normal(4))
    assert not np.array_equal(a, Rng(6, "x").normal(4))
    c1, c2 = Rng(5, "x").child("init"), Rng(5, "x").child("init")
    assert np.array_equal(c1.permutation(10), c2.permutation(10))


def test_trunc_normal_respects_bounds():
    draws = Rng(0).trunc_normal((20000,), std=0.02, bound=2.0)
    assert np.abs(draws).max() <= 0.04 + 1e-9
    assert draws.std() == pytest.approx(0.02 * 0.88, rel=0.05)  # truncation at 2 sigma shrinks std


def test_matmul_vector_times_matrix():
    a = Tensor(_rand(4, seed=14))
    b = Tensor(_rand((2, 4, 3), seed=15))
    assert matmul(a, b).shape == (2, 3)
    assert np.allclose(matmul(a, b).data, a.data @ b.data)
    assert grad_check(lambda t: tsum(matmul(t, b) * _rand((2, 3), 16)), a) < 1e-6
