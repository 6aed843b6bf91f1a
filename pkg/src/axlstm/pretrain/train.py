"""Masked-reconstruction pretraining loop."""

from __future__ import annotations

import csv
import hashlib
import math
import os
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from .. import __version__
from ..encoder import EncoderConfig, embed_patches, encode, init_params
from ..numcore import Rng, Tensor
from ..specfeat import PatchConfig, SAMPLE_RATE, logmel, patchify, sample_mask_batch
from .checkpoint import Checkpoint
from .data import Dataset, random_crop
from .objective import masked_mse, reconstruct
from .optim import AdamW, lr_schedule


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 32
    weight_decay: float = 0.05
    warmup_epochs: int = 10
    peak_lr: float = 3e-4
    seed: int = 0
    mask_ratio: float = 0.5
    crop_seconds: float = 2.0
    steps: int | None = None  # overrides epochs * steps-per-epoch when set
    patch: str = "4x16"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs} with epochs={self.epochs}")
        if not self.peak_lr > 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.crop_seconds <= 0:
            raise ValueError(f"crop_seconds must be positive, got {self.crop_seconds}")
        if self.steps is not None and self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        PatchConfig.parse(self.patch)

    @property
    def crop_samples(self) -> int:
        return int(round(self.crop_seconds * SAMPLE_RATE))

    def total_steps(self, n_clips: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_clips / self.batch_size)

    def warmup_steps(self, total: int) -> int:
        return int(round(total * self.warmup_epochs / self.epochs))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)


# Reduced desk-scale run: Tiny head layout, 4 blocks of width 64, 256 synthetic clips, 200 steps.
# The short schedule needs a larger step than the 3e-4 default to leave the flat start in time.
TOY_PEAK_LR = 5e-3


def toy_setup(seed: int = 7, steps: int = 200) -> tuple[PretrainConfig, EncoderConfig]:
    cfg = PretrainConfig(steps=steps, batch_size=32, peak_lr=TOY_PEAK_LR, seed=seed)
    return cfg, EncoderConfig.from_variant("tiny", d_m=64, depth=4)


class TrainError(RuntimeError):
    def __init__(self, step: int, clip_ids: list[str], cause: Exception):
        self.step, self.clip_ids = step, clip_ids
        super().__init__(f"step {step} (clips {', '.join(clip_ids[:4])}{', ...' if len(clip_ids) > 4 else ''}): "
                         f"{type(cause).__name__}: {cause}")


@dataclass
class TrainRecord:
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[TrainRecord]
    params: dict[str, Tensor]
    seconds: float

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.trace])


def batch_order(n_clips: int, batch_size: int, total_steps: int, rng: Rng) -> list[np.ndarray]:
    """Clip indices per step: one fresh permutation per epoch, last partial batch kept."""
    out: list[np.ndarray] = []
    while len(out) < total_steps:
        perm = rng.permutation(n_clips)
        out.extend(perm[i:i + batch_size] for i in range(0, n_clips, batch_size))
    return out[:total_steps]


def prepare_batch(waves: list[np.ndarray], cfg: PretrainConfig, rng: Rng) -> tuple[np.ndarray, tuple[int, int]]:
    """Random crops -> log-mel -> patches (B, N, t*f), plus the patch grid."""
    crops = np.stack([random_crop(w, cfg.crop_samples, rng) for w in waves])
    spec = logmel(crops)
    patch = PatchConfig.parse(cfg.patch)
    return patchify(spec, patch), patch.grid(*spec.shape[-2:])


def loss_on_batch(raw: np.ndarray, grid: tuple[int, int], params: dict, enc_cfg: EncoderConfig,
                  mask_ratio: float, rng: Rng, form: str = "parallel") -> Tensor:
    B, N, _ = raw.shape
    plan = sample_mask_batch(B, N, mask_ratio, rng)
    seq = embed_patches(raw, plan, params, enc_cfg, grid)
    z = encode(seq.tokens, enc_cfg, params, form)
    return masked_mse(reconstruct(z, params), raw, plan)


def loss_digest(losses) -> str:
    return hashlib.sha256(np.asarray(losses, dtype="<f8").tobytes()).hexdigest()[:16]


def make_checkpoint(params: dict[str, Tensor], enc_cfg: EncoderConfig, cfg: PretrainConfig,
                    step: int, losses) -> Checkpoint:
    meta = {
        "format": "axlstm-checkpoint",
        "package_version": __version__,
        "encoder": enc_cfg.to_dict(),
        "pretrain": cfg.to_dict(),
        "step": step,
        "loss_digest": loss_digest(losses),
        "final_loss": float(losses[-1]) if len(losses) else None,
    }
    return Checkpoint(meta, {n: p.data for n, p in params.items()})


def train(cfg: PretrainConfig, dataset: Dataset, enc_cfg: EncoderConfig,
          on_step: Callable[[TrainRecord], None] | None = None,
          params: dict[str, Tensor] | None = None) -> TrainResult:
    """Run the full pretraining loop; deterministic given ``cfg.seed``."""
    enc_cfg.validate()
    patch = PatchConfig.parse(cfg.patch)
    if len(dataset) == 0:
        raise ValueError("train: empty dataset")
    short = [c.clip_id for c in dataset.clips if len(c.waveform) < cfg.crop_samples]
    if short:
        raise ValueError(f"train: {len(short)} clips are shorter than {cfg.crop_seconds} s, e.g. {short[0]!r}")
    root = Rng(cfg.seed, "pretrain")
    if params is None:
        params = init_params(enc_cfg, patch, root.child("init"))
    opt = AdamW(weight_decay=cfg.weight_decay)
    total = cfg.total_steps(len(dataset))
    warm = cfg.warmup_steps(total)
    order = batch_order(len(dataset), cfg.batch_size, total, root.child("order"))
    crop_rng, mask_rng = root.child("crop"), root.child("mask")

    trace: list[TrainRecord] = []
    t0 = time.perf_counter()
    for step, idx in enumerate(order):
        ids = [dataset[i].clip_id for i in idx]
        lr = lr_schedule(step, total, warm, cfg.peak_lr)
        try:
            raw, grid = prepare_batch([dataset[i].waveform for i in idx], cfg, crop_rng)
            for p in params.values():
                p.grad = None
            loss = loss_on_batch(raw, grid, params, enc_cfg, cfg.mask_ratio, mask_rng)
            loss.backward()
            opt.step(params, lr)
        except Exception as err:  # noqa: BLE001 - rewrapped with step context
            raise TrainError(step, ids, err) from err
        rec = TrainRecord(step, lr, float(loss.data))
        trace.append(rec)
        if on_step is not None:
            on_step(rec)
    seconds = time.perf_counter() - t0
    ckpt = make_checkpoint(params, enc_cfg, cfg, total, [r.loss for r in trace])
    return TrainResult(ckpt, trace, params, seconds)


def write_loss_csv(path: str | os.PathLike, trace: list[TrainRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for r in trace:
            w.writerow([r.step, repr(r.lr), repr(r.loss)])


def read_loss_csv(path: str | os.PathLike) -> list[TrainRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TrainRecord(int(r["step"]), float(r["lr"]), float(r["loss"])) for r in rows]


def params_from_checkpoint(ckpt: Checkpoint, requires_grad: bool = False) -> dict[str, Tensor]:
    return {n: Tensor(a, requires_grad=requires_grad, name=n) for n, a in ckpt.tensors.items()}
