"""Dense tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks
that graph in reverse topological order. Values live in numpy arrays,
float32 unless a caller explicitly works in float64 (the finite-difference
oracle does).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "tensor", "zeros", "ones",
    "no_grad", "is_grad_enabled", "debug_mode", "set_debug", "default_dtype",
    "get_default_dtype", "make_op",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "exp", "log",
    "swapaxes", "sigmoid", "logsigmoid", "gelu", "silu", "maximum", "abs", "sqrt",
    "sum", "mean", "layer_norm", "reverse", "concat", "slice_axis",
    "reshape", "expand", "where", "log_softmax", "backward",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces inf or nan."""

    def __init__(self, op: str, count: int):
        self.op = op
        super().__init__(f"{op}: produced {count} non-finite value(s)")


_GRAD_ENABLED = True
_DEBUG = False
_DEFAULT_DTYPE = np.float32


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Run ops without recording parents (inference, benchmarks)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    global _DEBUG
    prev, _DEBUG = _DEBUG, flag
    try:
        yield
    finally:
        _DEBUG = prev


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Dtype used for tensors built from python data inside the block."""
    global _DEFAULT_DTYPE
    prev, _DEFAULT_DTYPE = _DEFAULT_DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ------------------------------------------------------
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def exp(self): return exp(self)
    def log(self): return log(self)

    @property
    def T(self): return transpose(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, dtype=None, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def ones(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE), requires_grad)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor(x)
    # python scalars adopt the default dtype so they never upcast float32 data
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def make_op(name: str, out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result as a graph node.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    if _DEBUG and not np.all(np.isfinite(out)):
        raise NonFiniteError(name, int(np.size(out) - np.count_nonzero(np.isfinite(out))))
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = name
    t.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t.requires_grad = needs
    t._parents = tuple(parents) if needs else ()
    t._backward = backward_fn if needs else None
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _bshape("add", a, b)
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _bshape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _bshape("mul", a, b)
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                              _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _bshape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb
    return make_op("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = _lift(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    _bshape("maximum", a, b)
    pick_a = a.data >= b.data
    return make_op("maximum", np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(pick_a, g, 0), a.shape),
                              _unbroadcast(np.where(pick_a, 0, g), b.shape)))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; the unselected side gets exactly zero gradient."""
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError("where", cond.shape, a.shape, b.shape) from None
    zero = np.zeros((), dtype=np.result_type(a.data, b.data))
    return make_op("where", np.where(cond, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, zero), a.shape),
                              _unbroadcast(np.where(cond, zero, g), b.shape)))


# -- matmul / layout -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product; a 1-D left operand is treated as a single row."""
    a, b = _lift(a), _lift(b)
    if a.ndim == 1 and b.ndim >= 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + (b.shape[-1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions must agree")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return make_op("matmul", out, (a, b), bw)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _lift(a)
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape, detail="needs at least 2 axes")
    return make_op("transpose", np.swapaxes(a.data, -1, -2).copy(), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = _lift(a)
    return make_op("swapaxes", np.swapaxes(a.data, axis1, axis2).copy(), (a,),
                   lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def expand(a, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` (materialized)."""
    a = _lift(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("expand", a.shape, tuple(shape)) from None
    return make_op("expand", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def reverse(a, axis: int = 0) -> Tensor:
    a = _lift(a)
    return make_op("reverse", np.flip(a.data, axis=axis).copy(), (a,),
                   lambda g: (np.flip(g, axis=axis),))


def concat(items: Iterable, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in items]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))
    return make_op("concat", out, ts, bw)


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Tensor:
    idx = [slice(None)] * _lift(a).ndim
    idx[axis] = slice(start, stop)
    return _getitem(a, tuple(idx))


def _getitem(a, idx) -> Tensor:
    a = _lift(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _is_advanced(idx) else full.__setitem__(idx, g)
        return (full,)
    return make_op("slice", np.array(out, order="C"), (a,), bw)


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


# -- elementwise unary ----------------------------------------------------------

def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    return make_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return make_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = _lift(a)
    return make_op("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = _sigmoid(a.data)
    return make_op("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def logsigmoid(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return make_op("logsigmoid", out, (a,), lambda g: (g * _sigmoid(-x),))


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = _lift(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2)).astype(x.dtype)
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)
    return make_op("gelu", out, (a,), bw)


def silu(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return make_op("silu", out, (a,), lambda g: (g * (s + a.data * s * (1 - s)),))


# -- reductions -----------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)
    return make_op("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)
    return make_op("mean", out, (a,), bw)


def layer_norm(a, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply optional scale/shift.

    A constant row has zero variance; with the eps floor it maps to zeros.
    """
    a = _lift(a)
    x = a.data
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    n = x.shape[-1]

    def bw_norm(g):
        # d xhat / dx for a row: rstd * (g - mean(g) - xhat * mean(g * xhat))
        gm = g.mean(-1, keepdims=True)
        gx = (g * xhat).mean(-1, keepdims=True)
        return (rstd * (g - gm - xhat * gx),)

    out = make_op("layer_norm", xhat.astype(x.dtype, copy=False), (a,), bw_norm)
    if weight is not None:
        w = _lift(weight)
        if w.shape != (n,):
            raise ShapeError("layer_norm", a.shape, w.shape, detail="scale must match last axis")
        out = mul(out, w)
    if bias is not None:
        b = _lift(bias)
        if b.shape != (n,):
            raise ShapeError("layer_norm", a.shape, b.shape, detail="shift must match last axis")
        out = add(out, b)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return make_op("log_softmax", out, (a,),
                   lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


# -- backward ---------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Leaf gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.data.dtype)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
