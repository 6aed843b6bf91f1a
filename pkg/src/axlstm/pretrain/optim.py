"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numcore import Tensor

NO_DECAY_SUFFIXES = (".b", "norm.w", "gn.w", ".skip", "cls_token", "mask_token")


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear 0 -> peak over ``warmup_steps``, then half-cosine down to 0 at ``total_steps``."""
    if step <= 0:
        return 0.0
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def decays(name: str) -> bool:
    """Biases, norm and skip scales, and the learned tokens are exempt from weight decay."""
    return not name.endswith(NO_DECAY_SUFFIXES)


class NonFiniteGradError(FloatingPointError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient for parameter {name!r}")


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        """One update from each parameter's ``.grad`` (missing grads count as zero)."""
        grads = {n: p.grad for n, p in params.items()}
        self.step_count += 1
        adamw_update(params, grads, self.m, self.v, self.step_count, lr, self.weight_decay,
                     self.beta1, self.beta2, self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return out


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], m: dict, v: dict,
                 step: int, lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8) -> None:
    """In-place AdamW step (parameters get fresh arrays; moments are updated in the dicts)."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteGradError(name)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        mt = m.get(name)
        vt = v.get(name)
        mt = (1 - beta1) * g if mt is None else beta1 * mt + (1 - beta1) * g
        vt = (1 - beta2) * g * g if vt is None else beta2 * vt + (1 - beta2) * g * g
        m[name], v[name] = mt.astype(p.dtype), vt.astype(p.dtype)
        new = p.data
        if wd and decays(name):
            new = new * (1.0 - lr * wd)
        new = new - lr * (mt / bc1) / (np.sqrt(vt / bc2) + eps)
        p.data = new.astype(p.dtype)
