"""Log-mel spectrograms: 25 ms Hann window, 10 ms hop, 80 mel bins at 16 kHz."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import SAMPLE_RATE

WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 400
N_MELS = 80
F_MIN = 0.0
F_MAX = 8000.0
LOG_FLOOR = 1e-5


@dataclass
class Spectrogram:
    values: np.ndarray  # (T, F) float32

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_fft//2 + 1, n_mels), unit peak height."""
    fft_freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    f = fft_freqs[:, None]
    up = (f - lo) / (mid - lo)
    down = (hi - f) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


@lru_cache(maxsize=2)
def _hann(n: int) -> np.ndarray:
    # periodic Hann, the usual STFT choice
    return (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)).astype(np.float32)


def n_frames(n_samples: int, hop: int = HOP_LENGTH) -> int:
    return math.ceil(n_samples / hop)


def logmel(waveform: np.ndarray, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Log-mel features for one clip (L,) -> (ceil(L/160), 80) or a batch (B, L) -> (B, T, 80)."""
    if sr != SAMPLE_RATE:
        raise ValueError(f"logmel expects {SAMPLE_RATE} Hz input, got {sr} Hz; resample first")
    x = np.asarray(waveform, dtype=np.float32)
    if x.shape[-1] == 0:
        raise ValueError("logmel: empty waveform")
    single = x.ndim == 1
    if single:
        x = x[None]
    length = x.shape[-1]
    frames = n_frames(length)
    pad = N_FFT // 2
    mode = "reflect" if length > 1 else "constant"
    padded = np.pad(x, ((0, 0), (pad, pad)), mode=mode)
    need = (frames - 1) * HOP_LENGTH + WIN_LENGTH
    if padded.shape[-1] < need:
        padded = np.pad(padded, ((0, 0), (0, need - padded.shape[-1])))
    idx = np.arange(frames)[:, None] * HOP_LENGTH + np.arange(WIN_LENGTH)[None, :]
    windows = padded[:, idx] * _hann(WIN_LENGTH)
    spec = np.fft.rfft(windows, n=N_FFT, axis=-1)
    power = (spec.real ** 2 + spec.imag ** 2).astype(np.float32)
    mel = power @ mel_filterbank().astype(np.float32)
    out = np.log(mel + np.float32(LOG_FLOOR)).astype(np.float32)
    return out[0] if single else out


# -- raw dumps: 8-byte header (uint32 T, uint32 F) + little-endian float32 ----------

def save_spectrogram(path: str | os.PathLike, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"spectrogram dump needs a 2-D array, got shape {values.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *values.shape))
        fh.write(values.tobytes())


def load_spectrogram(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise ValueError("spectrogram dump shorter than its 8-byte header")
    t, f = struct.unpack_from("<II", buf, 0)
    if len(buf) != 8 + 4 * t * f:
        raise ValueError(f"spectrogram dump size mismatch: header says {t}x{f}, "
                         f"payload has {len(buf) - 8} bytes")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(t, f).astype(np.float32)
