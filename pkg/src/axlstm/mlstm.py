"""The mLSTM cell: matrix memory, normalizer state, exponential gating.

Recurrent form, per head of width d (row-vector convention, ``x @ W``)::

    q = x Wq + bq        k = x Wk / sqrt(d) + bk        v = x Wv + bv
    i = exp(x.wi + bi)   f = exp(x.wf + bf)             o = sigmoid(x Wo + bo)
    C_t = f C_{t-1} + i v k^T        n_t = f n_{t-1} + i k
    h_t = o * (C_t q) / max(|n_t . q|, 1)

The exponential gates overflow quickly, so the state carries a log-space
stabilizer ``m`` and stores C, n scaled by exp(-m). With the floor rescaled
to exp(-m) the output is unchanged. The parallel form builds the L x L
decay matrix in log space and reproduces the recurrent output.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, fields

import numpy as np

from .numcore import (
    Rng, ShapeError, Tensor, abs, concat, exp, logsigmoid, make_op, matmul, maximum, reshape,
    sigmoid, slice_axis, sum,
)
from .numcore.tensor import _lift

GATE_TYPES = ("exponential", "sigmoid")

_SABOTAGE: set[str] = set()


class MLSTMError(FloatingPointError):
    pass


@contextlib.contextmanager
def sabotage(kind: str):
    """Deliberately break part of the cell so self-tests can prove they notice.

    Only ``"stabilizer"`` is recognised: the forget-gate rescale drops the
    previous stabilizer value, which corrupts the recurrent form.
    """
    if kind != "stabilizer":
        raise ValueError(f"unknown sabotage kind {kind!r}")
    _SABOTAGE.add(kind)
    try:
        yield
    finally:
        _SABOTAGE.discard(kind)


@dataclass
class MLSTMParams:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    wi: Tensor
    wf: Tensor
    bi: Tensor
    bf: Tensor
    Wo: Tensor
    bo: Tensor
    gate_type: str = "exponential"

    def __post_init__(self):
        if self.gate_type not in GATE_TYPES:
            raise ValueError(f"gate_type must be one of {GATE_TYPES}, got {self.gate_type!r}")
        d = self.Wq.shape[0]
        expect = {"Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "Wo": (d, d), "bq": (d,), "bk": (d,),
                  "bv": (d,), "bo": (d,), "wi": (d,), "wf": (d,), "bi": (), "bf": ()}
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeError("MLSTMParams", got, shape, detail=f"{name} for head width {d}")

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "gate_type"}

    @classmethod
    def random(cls, d: int, rng: Rng, gate_type: str = "exponential", gate_scale: float = 0.5,
               requires_grad: bool = False, dtype=np.float32) -> "MLSTMParams":
        def t(a):
            return Tensor(np.asarray(a, dtype=dtype), requires_grad=requires_grad)
        w = 1.0 / math.sqrt(d)
        return cls(
            Wq=t(rng.normal((d, d), w)), Wk=t(rng.normal((d, d), w)), Wv=t(rng.normal((d, d), w)),
            bq=t(rng.normal(d, 0.1)), bk=t(rng.normal(d, 0.1)), bv=t(rng.normal(d, 0.1)),
            wi=t(rng.normal(d, gate_scale * w)), wf=t(rng.normal(d, gate_scale * w)),
            bi=t(rng.normal((), 0.1)), bf=t(rng.normal((), 0.1)),
            Wo=t(rng.normal((d, d), w)), bo=t(rng.normal(d, 0.1)),
            gate_type=gate_type,
        )

    @classmethod
    def zeros(cls, d: int, gate_type: str = "exponential") -> "MLSTMParams":
        z = lambda *s: Tensor(np.zeros(s, np.float32))  # noqa: E731
        return cls(z(d, d), z(d, d), z(d, d), z(d), z(d), z(d), z(d), z(d), z(), z(), z(d, d), z(d),
                   gate_type=gate_type)


@dataclass
class MLSTMState:
    C: Tensor       # (..., d, d), scaled by exp(-m)
    n: Tensor       # (..., d), scaled by exp(-m)
    m: np.ndarray   # (...,) log-space stabilizer, carries no gradient

    @classmethod
    def zeros(cls, d: int, lead: tuple = (), dtype=np.float32) -> "MLSTMState":
        return cls(Tensor(np.zeros(lead + (d, d), dtype)), Tensor(np.zeros(lead + (d,), dtype)),
                   np.zeros(lead, dtype))


# -- gates and projections ------------------------------------------------------

def log_gates(i_pre: Tensor, f_pre: Tensor, gate_type: str) -> tuple[Tensor, Tensor]:
    """Log of the input and forget gates."""
    if gate_type == "exponential":
        return _lift(i_pre), _lift(f_pre)
    if gate_type == "sigmoid":
        return logsigmoid(i_pre), logsigmoid(f_pre)
    raise ValueError(f"gate_type must be one of {GATE_TYPES}, got {gate_type!r}")


def project(x: Tensor, p: MLSTMParams):
    """q, k, v, input/forget pre-activations and output gate for inputs x (..., d)."""
    x = _lift(x)
    if x.shape[-1] != p.d:
        raise ShapeError("mlstm", x.shape, (p.d,), detail="input width must equal head width")
    q = x @ p.Wq + p.bq
    k = (x @ p.Wk) * (1.0 / math.sqrt(p.d)) + p.bk
    v = x @ p.Wv + p.bv
    i_pre = sum(x * p.wi, axis=-1) + p.bi
    f_pre = sum(x * p.wf, axis=-1) + p.bf
    o = sigmoid(x @ p.Wo + p.bo)
    return q, k, v, i_pre, f_pre, o


# -- recurrent form -------------------------------------------------------------

def cell_step(state: MLSTMState, q: Tensor, k: Tensor, v: Tensor, logi: Tensor, logf: Tensor,
              stabilize: bool = True) -> tuple[MLSTMState, Tensor]:
    """One timestep of the memory update; returns the un-gated readout C q / max(|n.q|, 1)."""
    lead = q.shape[:-1]
    if stabilize:
        m_prev = state.m
        m_new = np.maximum(logf.data + m_prev, logi.data)
        carry = m_prev - m_new
        if "stabilizer" in _SABOTAGE:
            carry = -m_new
        igate = exp(logi - m_new)
        fgate = exp(logf + carry.astype(logf.dtype))
    else:
        m_new = np.zeros_like(state.m)
        igate, fgate = exp(logi), exp(logf)
    ig2, fg2 = reshape(igate, lead + (1, 1)), reshape(fgate, lead + (1, 1))
    outer = reshape(v, lead + (-1, 1)) * reshape(k, lead + (1, -1))
    C = fg2 * state.C + ig2 * outer
    n = reshape(fgate, lead + (1,)) * state.n + reshape(igate, lead + (1,)) * k
    num = reshape(matmul(C, reshape(q, lead + (-1, 1))), q.shape)
    floor = np.exp(-m_new.astype(np.float64)).astype(q.dtype)
    den = maximum(abs(sum(n * q, axis=-1)), floor)
    h = num / reshape(den, lead + (1,))
    return MLSTMState(C, n, m_new.astype(state.m.dtype)), h


def recurrent_cell(q: Tensor, k: Tensor, v: Tensor, logi: Tensor, logf: Tensor,
                   init: MLSTMState | None = None, stabilize: bool = True,
                   return_state: bool = False):
    """Fold ``cell_step`` over axis -2 of q/k/v (..., L, d); gates are (..., L)."""
    L, d = q.shape[-2:]
    lead = q.shape[:-2]
    state = init or MLSTMState.zeros(d, lead, q.dtype)
    outs = []
    for t in range(L):
        sl = lambda a: reshape(slice_axis(a, t, t + 1, axis=-2), lead + (d,))  # noqa: E731
        try:
            state, h = cell_step(state, sl(q), sl(k), sl(v),
                                 reshape(slice_axis(logi, t, t + 1, axis=-1), lead),
                                 reshape(slice_axis(logf, t, t + 1, axis=-1), lead), stabilize)
        except (ShapeError, FloatingPointError) as err:
            raise MLSTMError(f"timestep {t}: {err}") from err
        if not np.all(np.isfinite(h.data)):
            raise MLSTMError(f"timestep {t}: non-finite output (stabilizer failure)")
        outs.append(reshape(h, lead + (1, d)))
    out = concat(outs, axis=-2)
    return (out, state) if return_state else out


# -- parallel form ----------------------------------------------------------------

def _parallel_forward(q, k, v, logi, logf):
    L = q.shape[-2]
    dt = np.result_type(q, k, v)
    # log D[t, s] = cum_t - cum_s + logi_s = a_s + cum_t, whose row max is
    # cum_t + running_max(a)_t, so D / rowmax = exp(a_s - running_max(a)_t).
    cum = np.cumsum(logf.astype(np.float64), axis=-1)
    a = logi.astype(np.float64) - cum
    amax = np.maximum.accumulate(a, axis=-1)
    m = cum + amax
    expo = (a[..., None, :] - amax[..., :, None]).astype(dt)
    np.minimum(expo, 0, out=expo)  # only s > t can be positive; masked below
    D = np.exp(expo, out=expo)
    D *= np.tril(np.ones((L, L), dtype=dt))
    S = q @ np.swapaxes(k, -1, -2)
    A = D * S
    num = A @ v
    den_raw = A.sum(-1)
    floor = np.exp(-m)
    den = np.maximum(np.abs(den_raw).astype(np.float64), floor)
    h = (num / den[..., None]).astype(dt)
    return h, (D, S, A, den_raw, den, floor)


def parallel_cell(q: Tensor, k: Tensor, v: Tensor, logi: Tensor, logf: Tensor) -> Tensor:
    """Un-gated mLSTM readout for every timestep at once, from an empty memory.

    D[t, s] = exp(sum_{u=s+1..t} log f_u + log i_s) for s <= t, divided by its
    row max (the shift cancels in the ratio). Gate cumulative sums and the
    stabilizer are kept in float64 so long sequences of large gates stay exact.
    """
    q, k, v, logi, logf = (_lift(a) for a in (q, k, v, logi, logf))
    if not (q.shape == k.shape == v.shape) or logi.shape != q.shape[:-1] or logf.shape != logi.shape:
        raise ShapeError("parallel_cell", q.shape, k.shape, v.shape, logi.shape, logf.shape)
    h, (D, S, A, den_raw, den, floor) = _parallel_forward(q.data, k.data, v.data, logi.data, logf.data)
    if not np.all(np.isfinite(h)):
        raise MLSTMError("parallel_cell: non-finite output after log-space stabilization")
    floor_active = np.abs(den_raw) < floor

    def bw(g):
        dt = g.dtype
        g_num = (g / den[..., None]).astype(dt)
        # d h / d den_raw, zero where the floor is the active branch
        g_den = -(g * h).sum(-1) / den
        g_raw = np.where(floor_active, 0.0, g_den * np.sign(den_raw)).astype(dt)
        g_A = g_num @ np.swapaxes(v.data, -1, -2)
        g_A += g_raw[..., None]
        g_v = np.swapaxes(A, -1, -2) @ g_num
        g_S = g_A
        g_S *= D                     # dL/dS; D is zero above the diagonal
        g_q = g_S @ k.data
        g_k = np.swapaxes(g_S, -1, -2) @ q.data
        g_logD = g_S * S
        g_logi = g_logD.sum(-2)
        g_cum = g_logD.sum(-1) - g_logi
        g_logf = np.flip(np.cumsum(np.flip(g_cum, -1), axis=-1), -1)
        return g_q, g_k, g_v, g_logi, g_logf

    return make_op("parallel_cell", h, (q, k, v, logi, logf), bw)


# -- full cell ------------------------------------------------------------------

def _check_finite(h: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(h.data)):
        raise MLSTMError(f"{where}: non-finite output")
    return h


def mlstm_step(state: MLSTMState, x_t: Tensor, p: MLSTMParams) -> tuple[MLSTMState, Tensor]:
    q, k, v, i_pre, f_pre, o = project(x_t, p)
    logi, logf = log_gates(i_pre, f_pre, p.gate_type)
    state, h = cell_step(state, q, k, v, logi, logf, stabilize=p.gate_type == "exponential")
    return state, _check_finite(o * h, "mlstm_step")


def mlstm_recurrent(seq: Tensor, p: MLSTMParams, init: MLSTMState | None = None,
                    return_state: bool = False):
    """Left-to-right fold of ``mlstm_step`` over seq (..., L, d)."""
    seq = _lift(seq)
    if seq.shape[-2] < 1:
        raise ShapeError("mlstm_recurrent", seq.shape, detail="empty sequence")
    q, k, v, i_pre, f_pre, o = project(seq, p)
    logi, logf = log_gates(i_pre, f_pre, p.gate_type)
    h, state = recurrent_cell(q, k, v, logi, logf, init=init,
                              stabilize=p.gate_type == "exponential", return_state=True)
    out = o * h
    return (out, state) if return_state else out


def mlstm_parallel(seq: Tensor, p: MLSTMParams) -> Tensor:
    seq = _lift(seq)
    q, k, v, i_pre, f_pre, o = project(seq, p)
    logi, logf = log_gates(i_pre, f_pre, p.gate_type)
    return _check_finite(o * parallel_cell(q, k, v, logi, logf), "mlstm_parallel")


def multihead_mlstm(seq: Tensor, heads: int, params: list[MLSTMParams], form: str = "parallel") -> Tensor:
    """Split channels into ``heads`` contiguous groups, run each head, concatenate."""
    seq = _lift(seq)
    width = seq.shape[-1]
    if heads < 1 or width % heads:
        raise ShapeError("multihead_mlstm", seq.shape, detail=f"width {width} not divisible by {heads} heads")
    if len(params) != heads:
        raise ValueError(f"multihead_mlstm: expected {heads} parameter sets, got {len(params)}")
    d = width // heads
    run = {"parallel": mlstm_parallel, "recurrent": mlstm_recurrent}[form]
    outs = [run(slice_axis(seq, h * d, (h + 1) * d, axis=-1), params[h]) for h in range(heads)]
    return outs[0] if heads == 1 else concat(outs, axis=-1)
