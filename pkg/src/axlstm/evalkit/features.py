"""Fixed-size clip features from a frozen encoder."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from ..encoder import EncoderConfig, embed_patches, encode
from ..numcore import Tensor, no_grad
from ..pretrain.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from ..specfeat import SAMPLE_RATE, PatchConfig, empty_plan, logmel, patchify

CHUNK_SECONDS = 2.0
MIN_SECONDS = 0.1
POOLINGS = ("mean", "concat")


@dataclass
class FeatureVector:
    clip_id: str
    values: np.ndarray


@dataclass
class FrozenEncoder:
    """Everything needed to embed audio: weights, encoder config and patch shape."""
    params: dict[str, Tensor]
    cfg: EncoderConfig
    patch: PatchConfig

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "FrozenEncoder":
        if "encoder" not in ckpt.metadata:
            raise ValueError("checkpoint metadata has no encoder config")
        cfg = EncoderConfig.from_dict(ckpt.metadata["encoder"])
        patch = PatchConfig.parse(ckpt.metadata.get("pretrain", {}).get("patch", "4x16"))
        params = {n: Tensor(a, name=n) for n, a in ckpt.tensors.items()}
        return cls(params, cfg, patch)

    @classmethod
    def load(cls, path: str | os.PathLike, expect: dict | None = None) -> "FrozenEncoder":
        return cls.from_checkpoint(load_checkpoint(path, expect))


def split_chunks(waveform: np.ndarray, chunk: int = int(CHUNK_SECONDS * SAMPLE_RATE)) -> np.ndarray:
    """Consecutive chunks (k, chunk); the last one is reflect-padded."""
    x = np.asarray(waveform, dtype=np.float32)
    if x.ndim != 1:
        raise ValueError(f"expected a mono waveform, got shape {x.shape}")
    if len(x) < int(MIN_SECONDS * SAMPLE_RATE):
        raise ValueError(f"clip is {len(x) / SAMPLE_RATE:.3f} s; at least {MIN_SECONDS} s is required")
    k = -(-len(x) // chunk)
    pad = k * chunk - len(x)
    if pad:
        tail = x[(k - 1) * chunk:]
        # numpy reflects repeatedly when the pad exceeds the tail length
        x = np.concatenate([x[:(k - 1) * chunk], np.pad(tail, (0, pad), mode="reflect" if len(tail) > 1 else "edge")])
    return x.reshape(k, chunk)


def chunk_embeddings(chunks: np.ndarray, model: FrozenEncoder) -> np.ndarray:
    """(k, chunk samples) -> (k, d_m): mean over patch tokens, cls excluded, no masking."""
    spec = logmel(chunks)
    raw = patchify(spec, model.patch)
    grid = model.patch.grid(*spec.shape[-2:])
    with no_grad():
        seq = embed_patches(raw, empty_plan(raw.shape[-2], raw.shape[0]), model.params, model.cfg, grid)
        z = encode(seq.tokens, model.cfg, model.params).data
    return z[:, 1:, :].mean(axis=1)


def extract_features(waveform: np.ndarray, model: FrozenEncoder, pooling: str = "mean",
                     clip_id: str = "") -> FeatureVector:
    if pooling not in POOLINGS:
        raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    emb = chunk_embeddings(split_chunks(waveform), model)
    values = emb.mean(axis=0) if pooling == "mean" else emb.reshape(-1)
    return FeatureVector(clip_id, values.astype(np.float32))


def extract_dataset(waves: list[np.ndarray], ids: list[str], model: FrozenEncoder,
                    pooling: str = "mean") -> np.ndarray:
    if len(waves) != len(ids):
        raise ValueError("extract_dataset: waveform and id lists differ in length")
    return np.stack([extract_features(w, model, pooling, i).values for w, i in zip(waves, ids)])


def save_features(path: str | os.PathLike, ids: list[str], features: np.ndarray, metadata: dict | None = None) -> None:
    meta = {"format": "axlstm-features", "clip_ids": list(ids), **(metadata or {})}
    save_checkpoint(path, Checkpoint(meta, {i: f for i, f in zip(ids, features)}), names=list(ids))


def load_features(path: str | os.PathLike) -> tuple[list[str], np.ndarray, dict]:
    ckpt = load_checkpoint(path)
    ids = ckpt.metadata.get("clip_ids", list(ckpt.tensors))
    if not ids:
        raise ValueError(f"{path}: feature dump holds no clips")
    return ids, np.stack([ckpt.tensors[i] for i in ids]), ckpt.metadata
