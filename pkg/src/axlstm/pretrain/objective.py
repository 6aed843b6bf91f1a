"""Reconstruction head and the masked MSE objective."""

from __future__ import annotations

import numpy as np

from ..numcore import ShapeError, Tensor, gelu, slice_axis, where
from ..numcore import sum as tsum
from ..specfeat import MaskPlan


def reconstruct(z: Tensor, params: dict) -> Tensor:
    """Drop the cls row and map each token back to a flattened patch."""
    W1, b1 = params["head.fc1.W"], params["head.fc1.b"]
    W2, b2 = params["head.fc2.W"], params["head.fc2.b"]
    if z.shape[-1] != W1.shape[0]:
        raise ShapeError("reconstruct", z.shape, W1.shape, detail="token width vs head input")
    tokens = slice_axis(z, 1, z.shape[-2], axis=-2)
    return gelu(tokens @ W1 + b1) @ W2 + b2


def masked_mse(pred: Tensor, target: np.ndarray, plan: MaskPlan) -> Tensor:
    """Mean over masked patches of the per-patch mean squared error.

    Batched inputs average over every masked patch in the batch. Unmasked
    rows are routed through ``where`` so their gradient is exactly zero.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError("masked_mse", pred.shape, target.shape)
    masked = np.asarray(plan.masked, dtype=bool)
    if masked.shape != pred.shape[:-1]:
        raise ShapeError("masked_mse", pred.shape, masked.shape, detail="mask plan")
    n_masked = int(masked.sum())
    if n_masked == 0:
        raise ValueError("masked_mse: the plan masks no patches")
    diff = where(masked[..., None], pred - target, 0.0)
    return tsum(diff * diff) * (1.0 / (n_masked * pred.shape[-1]))
