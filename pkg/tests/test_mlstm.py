import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from axlstm.cli.bench import normwise_error
from axlstm.cli.selftest import (equivalence_error, extreme_gate_params, extreme_gate_run, stabilizer_error,
                                 step_grad_error)
from axlstm.mlstm import (MLSTMError, MLSTMParams, MLSTMState, multihead_mlstm, mlstm_parallel, mlstm_recurrent,
                          mlstm_step, parallel_cell, recurrent_cell, sabotage)
from axlstm.numcore import Rng, ShapeError, Tensor, default_dtype, grad_check, no_grad
from axlstm.numcore import sum as tsum
from axlstm.reference import max_relative_error, naive_mlstm


def _params64(d, seed, gate_type="exponential", **kw):
    return MLSTMParams.random(d, Rng(seed, "t"), gate_type, dtype=np.float64, **kw)


@pytest.mark.parametrize("L", [1, 2, 7, 64])
@pytest.mark.parametrize("d", [4, 16])
def test_parallel_matches_recurrent(L, d):
    assert max(equivalence_error(L, d, s) for s in range(2)) <= 1e-4


@pytest.mark.parametrize("L", [1, 7, 40])
def test_parallel_matches_recurrent_sigmoid_gates(L):
    assert equivalence_error(L, 8, 0, "sigmoid") <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.sampled_from([2, 4, 8]), st.integers(0, 10_000), st.floats(0.1, 3.0))
def test_equivalence_property(L, d, seed, gate_scale):
    rng = Rng(seed)
    p = MLSTMParams.random(d, rng, gate_scale=gate_scale, dtype=np.float64)
    x = Tensor(rng.normal((L, d), 1.0, dtype=np.float64))
    with default_dtype(np.float64), no_grad():
        assert max_relative_error(mlstm_parallel(x, p), mlstm_recurrent(x, p)) <= 1e-6


def test_float32_forms_agree_normwise():
    rng = Rng(3)
    p = MLSTMParams.random(32, rng)
    x = Tensor(rng.normal((250, 32), 1.0))
    with no_grad():
        assert normwise_error(mlstm_parallel(x, p).data, mlstm_recurrent(x, p).data) < 1e-4


def test_batched_inputs_match_per_sample():
    rng = Rng(4)
    p = _params64(6, 4)
    x = rng.normal((3, 10, 6), 1.0, dtype=np.float64)
    with default_dtype(np.float64), no_grad():
        batched = mlstm_parallel(Tensor(x), p).data
        for b in range(3):
            assert np.allclose(batched[b], mlstm_recurrent(Tensor(x[b]), p).data, atol=1e-12, rtol=0)


def test_stabilized_step_matches_naive_oracle():
    assert max(stabilizer_error(s) for s in range(10)) <= 1e-5


def test_naive_oracle_matches_hand_computed_first_step():
    # at t=1 from an empty memory: h = o * v (k.q) i / max(|i k.q|, 1)
    p = _params64(3, 9)
    x = np.array([[0.3, -0.2, 0.5]])
    q = x[0] @ p.Wq.data + p.bq.data
    k = x[0] @ p.Wk.data / np.sqrt(3) + p.bk.data
    v = x[0] @ p.Wv.data + p.bv.data
    i = np.exp(x[0] @ p.wi.data + p.bi.data)
    o = 1 / (1 + np.exp(-(x[0] @ p.Wo.data + p.bo.data)))
    expected = o * v * (k @ q) * i / max(abs(i * (k @ q)), 1.0)
    assert np.allclose(naive_mlstm(x, p)[0], expected, rtol=1e-12)
    with default_dtype(np.float64), no_grad():
        assert np.allclose(mlstm_recurrent(Tensor(x), p).data[0], expected, rtol=1e-10)


@pytest.mark.parametrize("i_pre", [20.0, -20.0])
@pytest.mark.parametrize("f_pre", [20.0, -20.0])
def test_extreme_gates_stay_finite(i_pre, f_pre):
    stable, _ = extreme_gate_run(i_pre, f_pre)
    assert stable


def test_naive_float32_overflows_where_stabilized_does_not():
    stable, naive = extreme_gate_run(20.0, 20.0)
    assert stable and not naive


def test_extreme_gates_parallel_agrees_with_recurrent():
    rng = Rng(5)
    p = extreme_gate_params(8, 20.0, 20.0, rng, dtype=np.float64)
    x = Tensor(rng.normal((64, 8), 1.0, dtype=np.float64))
    with default_dtype(np.float64), no_grad():
        assert max_relative_error(mlstm_parallel(x, p), mlstm_recurrent(x, p)) <= 1e-8


def test_state_continuation_equals_single_pass():
    rng = Rng(6)
    p = _params64(5, 6)
    x = rng.normal((12, 5), 1.0, dtype=np.float64)
    with default_dtype(np.float64), no_grad():
        full = mlstm_recurrent(Tensor(x), p).data
        a, state = mlstm_recurrent(Tensor(x[:7]), p, return_state=True)
        b = mlstm_recurrent(Tensor(x[7:]), p, init=state)
        state1 = MLSTMState.zeros(5, dtype=np.float64)
        steps = []
        for t in range(12):
            state1, h = mlstm_step(state1, Tensor(x[t]), p)
            steps.append(h.data)
    assert np.allclose(np.concatenate([a.data, b.data]), full, atol=1e-13, rtol=0)
    assert np.allclose(np.stack(steps), full, atol=1e-13, rtol=0)


def test_zero_forget_memory_only_keeps_current_step():
    # log f = -inf erases history, so each output depends on its own token only
    rng = Rng(7)
    q, k, v = (Tensor(rng.normal((6, 4), 1.0, dtype=np.float64)) for _ in range(3))
    logi = Tensor(np.zeros(6))
    logf = Tensor(np.full(6, -1e4))
    with default_dtype(np.float64), no_grad():
        h = parallel_cell(q, k, v, logi, logf).data
    kq = (k.data * q.data).sum(-1)
    expected = v.data * (kq / np.maximum(np.abs(kq), 1.0))[:, None]
    assert np.allclose(h, expected, atol=1e-12)


def test_multihead_splits_channels():
    rng = Rng(8)
    heads = [_params64(4, s) for s in range(3)]
    x = rng.normal((9, 12), 1.0, dtype=np.float64)
    with default_dtype(np.float64), no_grad():
        out = multihead_mlstm(Tensor(x), 3, heads).data
        for h in range(3):
            ref = mlstm_recurrent(Tensor(x[:, 4 * h:4 * h + 4]), heads[h]).data
            assert np.allclose(out[:, 4 * h:4 * h + 4], ref, atol=1e-12)
    with pytest.raises(ShapeError):
        multihead_mlstm(Tensor(x), 5, heads)


def test_shape_and_config_errors():
    p = _params64(4, 0)
    with pytest.raises(ShapeError):
        mlstm_parallel(Tensor(np.ones((3, 5))), p)
    with pytest.raises(ShapeError):
        mlstm_recurrent(Tensor(np.ones((0, 4))), p)
    with pytest.raises(ValueError):
        MLSTMParams.random(4, Rng(0), "tanh")


def test_step_gradient():
    assert step_grad_error() <= 1e-3


@pytest.mark.parametrize("form", ["parallel", "recurrent"])
@pytest.mark.parametrize("gate_type", ["exponential", "sigmoid"])
def test_cell_gradients_match_finite_differences(form, gate_type):
    rng = Rng(10)
    L, d = 6, 3
    q, k, v = (rng.normal((L, d), 1.0, dtype=np.float64) for _ in range(3))
    logi = rng.normal(L, 1.0, dtype=np.float64)
    logf = rng.normal(L, 1.0, dtype=np.float64)
    if gate_type == "sigmoid":
        logi, logf = -np.logaddexp(0, -logi), -np.logaddexp(0, -logf)
    w = rng.normal((L, d), 1.0, dtype=np.float64)
    run = parallel_cell if form == "parallel" else (
        lambda *a: recurrent_cell(*a, stabilize=gate_type == "exponential"))
    inputs = [q, k, v, logi, logf]
    with default_dtype(np.float64):
        for slot in range(5):
            def f(t, slot=slot):
                args = [Tensor(a) for a in inputs]
                args[slot] = t
                return tsum(run(*args) * w)
            assert grad_check(f, Tensor(inputs[slot])) <= 1e-6


def test_parallel_and_recurrent_gradients_agree():
    rng = Rng(11)
    x = rng.normal((20, 6), 1.0, dtype=np.float64)
    grads = []
    for fn in (mlstm_parallel, mlstm_recurrent):
        p = MLSTMParams.random(6, Rng(11, "p"), dtype=np.float64, requires_grad=True)
        with default_dtype(np.float64):
            tsum(fn(Tensor(x), p) * fn(Tensor(x), p)).backward()
        grads.append({n: t.grad for n, t in p.tensors().items()})
    for n in grads[0]:
        assert np.allclose(grads[0][n], grads[1][n], rtol=1e-8, atol=1e-10), n


def test_sabotaged_stabilizer_is_detected():
    with sabotage("stabilizer"):
        assert equivalence_error(64, 8, 0) > 1e-4
    assert equivalence_error(64, 8, 0) <= 1e-4
    with pytest.raises(ValueError):
        with sabotage("gates"):
            pass


def test_non_finite_input_raises():
    p = _params64(4, 0)
    x = np.ones((3, 4))
    x[1, 2] = np.nan
    with pytest.raises(MLSTMError):
        with no_grad():
            mlstm_parallel(Tensor(x), p)
