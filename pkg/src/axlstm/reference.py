"""Plain float64 numpy mLSTM with no stabilizer, used as an independent oracle.

Shares no code with :mod:`axlstm.mlstm` beyond reading parameter arrays.
It overflows for large gate pre-activations, which is the point.
"""

from __future__ import annotations

import numpy as np


def max_relative_error(got, ref, floor: float = 1e-12) -> float:
    """max |got - ref| / (|ref| + floor), elementwise."""
    got = np.asarray(getattr(got, "data", got), dtype=np.float64)
    ref = np.asarray(getattr(ref, "data", ref), dtype=np.float64)
    if got.shape != ref.shape:
        raise ValueError(f"shape mismatch {got.shape} vs {ref.shape}")
    return float(np.max(np.abs(got - ref) / (np.abs(ref) + floor), initial=0.0))


def naive_mlstm(x: np.ndarray, p, gate_type: str | None = None, dtype=np.float64) -> np.ndarray:
    """x (L, d) -> h (L, d) by the textbook recurrence with exp gates and a floor of 1."""
    gate_type = gate_type or p.gate_type

    def _arr(t) -> np.ndarray:
        return np.asarray(getattr(t, "data", t), dtype=dtype)

    x = np.asarray(x, dtype=dtype)
    Wq, Wk, Wv, Wo = (_arr(w) for w in (p.Wq, p.Wk, p.Wv, p.Wo))
    bq, bk, bv, bo = (_arr(b) for b in (p.bq, p.bk, p.bv, p.bo))
    wi, wf, bi, bf = _arr(p.wi), _arr(p.wf), _arr(p.bi), _arr(p.bf)
    d = x.shape[-1]
    C = np.zeros((d, d), dtype)
    n = np.zeros(d, dtype)
    out = np.empty_like(x)
    with np.errstate(over="ignore", invalid="ignore"):
        for t, xt in enumerate(x):
            q = xt @ Wq + bq
            k = (xt @ Wk) / dtype(np.sqrt(d)) + bk
            v = xt @ Wv + bv
            ip, fp = xt @ wi + bi, xt @ wf + bf
            if gate_type == "exponential":
                i, f = np.exp(ip), np.exp(fp)
            else:
                i, f = 1 / (1 + np.exp(-ip)), 1 / (1 + np.exp(-fp))
            o = 1 / (1 + np.exp(-(xt @ Wo + bo)))
            C = f * C + i * np.outer(v, k)
            n = f * n + i * k
            out[t] = o * (C @ q) / max(abs(n @ q), dtype(1.0))
    return out
