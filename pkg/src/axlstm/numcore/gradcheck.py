"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, default_dtype, no_grad


class GradCheckError(FloatingPointError):
    def __init__(self, index: tuple, value: float):
        self.index = index
        super().__init__(f"non-finite function value {value} when perturbing element {index}")


def _scalar(t: Tensor) -> float:
    if t.data.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {t.shape}")
    return float(t.data.reshape(-1)[0])


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Iterable[tuple] | None = None,
    scale_floor: float = 0.0,
) -> float:
    """Max over elements of |analytic - numeric| / (|numeric| + floor).

    ``floor`` is 1e-8, raised to ``scale_floor * max|analytic|`` when that is
    larger, so elements whose true gradient is ~0 are judged against the
    gradient's overall scale instead of against finite-difference noise.

    ``x`` is copied to float64 and ``f`` runs under a float64 default dtype,
    so float32 tensors captured by ``f`` are promoted on contact. ``indices``
    restricts the numeric sweep to a subset of elements.
    """
    if not 0.0 < eps < 1e-1:
        raise ValueError(f"grad_check: eps must lie in (0, 0.1), got {eps}")
    base = np.array(x.data, dtype=np.float64)
    with default_dtype(np.float64):
        xt = Tensor(base.copy(), requires_grad=True)
        y = f(xt)
        val = _scalar(y)
        if not np.isfinite(val):
            raise GradCheckError((), val)
        y.backward()
        analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

        floor = max(1e-8, scale_floor * float(np.abs(analytic).max(initial=0.0)))
        worst = 0.0
        idx_iter = indices if indices is not None else np.ndindex(*base.shape)
        for idx in idx_iter:
            idx = tuple(idx)
            vals = []
            for sign in (1.0, -1.0):
                probe = base.copy()
                probe[idx] += sign * eps
                with no_grad():
                    v = _scalar(f(Tensor(probe)))
                if not np.isfinite(v):
                    raise GradCheckError(idx, v)
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2 * eps)
            err = abs(analytic[idx] - numeric) / (abs(numeric) + floor)
            worst = max(worst, float(err))
    return worst
