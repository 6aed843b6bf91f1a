"""Patch grid, 2-D sin-cos positions, unstructured masking and the encoder input."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..numcore import Rng, ShapeError, Tensor, concat, expand, reshape, where


@dataclass(frozen=True)
class PatchConfig:
    t: int = 4   # frames per patch
    f: int = 16  # mel bins per patch

    @property
    def size(self) -> int:
        return self.t * self.f

    def grid(self, frames: int, bins: int) -> tuple[int, int]:
        return frames // self.t, bins // self.f

    def num_patches(self, frames: int = 200, bins: int = 80) -> int:
        gh, gw = self.grid(frames, bins)
        return gh * gw

    @classmethod
    def parse(cls, text: str) -> "PatchConfig":
        """'4x16' -> PatchConfig(4, 16)."""
        t, f = text.lower().split("x")
        return cls(int(t), int(f))

    def __str__(self) -> str:
        return f"{self.t}x{self.f}"


class PatchShapeError(ValueError):
    pass


def patchify(spec: np.ndarray, cfg: PatchConfig) -> np.ndarray:
    """(..., T, F) -> (..., N, t*f), grid traversed time-major."""
    spec = np.asarray(spec)
    T, F = spec.shape[-2:]
    if T % cfg.t or F % cfg.f:
        raise PatchShapeError(
            f"spectrogram {T}x{F} is not divisible by patch {cfg.t}x{cfg.f}; "
            f"crop to {T - T % cfg.t}x{F - F % cfg.f} first")
    gh, gw = T // cfg.t, F // cfg.f
    lead = spec.shape[:-2]
    x = spec.reshape(*lead, gh, cfg.t, gw, cfg.f)
    x = np.moveaxis(x, -3, -2)  # (..., gh, gw, t, f)
    return np.ascontiguousarray(x).reshape(*lead, gh * gw, cfg.t * cfg.f)


def unpatchify(patches: np.ndarray, cfg: PatchConfig, grid: tuple[int, int]) -> np.ndarray:
    patches = np.asarray(patches)
    gh, gw = grid
    N, P = patches.shape[-2:]
    if N != gh * gw or P != cfg.size:
        raise PatchShapeError(f"cannot unpatchify {N}x{P} patches onto grid {gh}x{gw} "
                              f"of {cfg.t}x{cfg.f} tiles")
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, gh, gw, cfg.t, cfg.f)
    x = np.moveaxis(x, -2, -3)  # (..., gh, t, gw, f)
    return np.ascontiguousarray(x).reshape(*lead, gh * cfg.t, gw * cfg.f)


def _sincos_1d(pos: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2))
    ang = pos[:, None].astype(np.float64) * omega[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@lru_cache(maxsize=32)
def _posemb_cached(grid_h: int, grid_w: int, d_m: int) -> np.ndarray:
    half = d_m // 2
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    table = np.concatenate([_sincos_1d(rows.reshape(-1), half),
                            _sincos_1d(cols.reshape(-1), half)], axis=1)
    table = table.astype(np.float32)
    table.setflags(write=False)
    return table


def posemb_2d(grid_h: int, grid_w: int, d_m: int) -> np.ndarray:
    """Fixed 2-D sin-cos table of shape (grid_h*grid_w, d_m).

    The first half of the channels encodes the time row, the second half the
    frequency column; each half is [sin | cos] over the same frequencies.
    """
    if d_m % 4:
        raise ValueError(f"posemb_2d: d_m must be divisible by 4, got {d_m}")
    return _posemb_cached(int(grid_h), int(grid_w), int(d_m)).copy()


def posemb_with_cls(grid_h: int, grid_w: int, d_m: int) -> np.ndarray:
    """Positional table with a leading all-zero row for the cls token."""
    table = posemb_2d(grid_h, grid_w, d_m)
    return np.concatenate([np.zeros((1, d_m), np.float32), table], axis=0)


@dataclass
class MaskPlan:
    total: int
    masked: np.ndarray  # bool (total,), or (B, total) for a batch
    ratio: float

    @property
    def count(self) -> int:
        return int(self.masked.sum(axis=-1).reshape(-1)[0])


def mask_count(n: int, ratio: float) -> int:
    """round(ratio*n) with halves rounded up."""
    return int(np.floor(ratio * n + 0.5))


def sample_mask(n: int, ratio: float, rng: Rng) -> MaskPlan:
    """Choose exactly round(ratio*n) patch indices uniformly without replacement."""
    if n <= 0:
        raise ValueError("sample_mask: no patches to mask")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"sample_mask: ratio must lie in (0, 1), got {ratio}")
    k = mask_count(n, ratio)
    masked = np.zeros(n, dtype=bool)
    masked[rng.permutation(n)[:k]] = True
    return MaskPlan(n, masked, ratio)


def sample_mask_batch(batch: int, n: int, ratio: float, rng: Rng) -> MaskPlan:
    plans = [sample_mask(n, ratio, rng).masked for _ in range(batch)]
    return MaskPlan(n, np.stack(plans), ratio)


def empty_plan(n: int, batch: int | None = None) -> MaskPlan:
    shape = (n,) if batch is None else (batch, n)
    return MaskPlan(n, np.zeros(shape, dtype=bool), 0.0)


@dataclass
class PatchSequence:
    tokens: Tensor          # (..., N+1, d_m); row 0 is cls
    plan: MaskPlan
    pos: np.ndarray         # (N+1, d_m); row 0 zeros
    raw_patches: np.ndarray  # (..., N, t*f)


def build_encoder_input(raw_patches: np.ndarray, plan: MaskPlan, embed_W: Tensor, embed_b: Tensor,
                        cls_token: Tensor, mask_token: Tensor, pos: np.ndarray) -> PatchSequence:
    """Embed patches, substitute the mask token at masked positions, add positions, prepend cls.

    Works on a single clip (N, P) or a batch (B, N, P). Positions are added
    after substitution, so mask tokens carry their grid location.
    """
    raw = np.asarray(raw_patches, dtype=np.float32)
    N, P = raw.shape[-2:]
    d = embed_W.shape[-1]
    if embed_W.shape != (P, d):
        raise ShapeError("build_encoder_input", raw.shape, embed_W.shape, detail="patch embedding")
    if plan.masked.shape != raw.shape[:-1]:
        raise ShapeError("build_encoder_input", raw.shape, plan.masked.shape, detail="mask plan")
    if pos.shape != (N + 1, d):
        raise ShapeError("build_encoder_input", pos.shape, (N + 1, d), detail="positional table")
    for name, tok in (("cls_token", cls_token), ("mask_token", mask_token), ("embed_b", embed_b)):
        if tok.shape != (d,):
            raise ShapeError("build_encoder_input", tok.shape, (d,), detail=name)

    emb = Tensor(raw) @ embed_W + embed_b
    body = where(plan.masked[..., None], mask_token, emb) + pos[1:]
    lead = raw.shape[:-2]
    head = reshape(cls_token + pos[0], (1,) * len(lead) + (1, d))
    if lead:
        head = expand(head, lead + (1, d))
    tokens = concat([head, body], axis=-2)
    return PatchSequence(tokens, plan, pos, raw)
