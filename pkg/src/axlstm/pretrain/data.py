"""Desk-scale stand-in for a large audio corpus: reproducible tone mixtures.

Each clip is 3 s at 16 kHz holding 1-3 sinusoids (100-6000 Hz) that switch on
at random onsets, plus white noise at 10-30 dB SNR, peak-normalized. The
label is the frequency band (equal-width on the mel scale) of the tone that
carries the most energy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numcore import Rng
from ..specfeat import SAMPLE_RATE, load_wav
from ..specfeat.features import hz_to_mel, mel_to_hz

CLIP_SECONDS = 3.0
F_LOW, F_HIGH = 100.0, 6000.0
PEAK = 0.95


def band_edges(n_classes: int) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(F_LOW), hz_to_mel(F_HIGH), n_classes + 1))


def band_of(freq: float, n_classes: int) -> int:
    edges = band_edges(n_classes)
    return int(np.clip(np.searchsorted(edges, freq, side="right") - 1, 0, n_classes - 1))


@dataclass
class Clip:
    clip_id: str
    waveform: np.ndarray
    label: int
    freqs: tuple = ()


@dataclass
class Dataset:
    clips: list[Clip]
    n_classes: int = 0

    def __len__(self) -> int:
        return len(self.clips)

    def __getitem__(self, i: int) -> Clip:
        return self.clips[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips])


def synth_clip(rng: Rng, n_classes: int = 4, n_tones: int | None = None, noise: bool = True,
               seconds: float = CLIP_SECONDS, clip_id: str = "") -> Clip:
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    k = int(rng.integers(1, 4)) if n_tones is None else n_tones
    x = np.zeros(n)
    energies, freqs = [], []
    for _ in range(k):
        # log-uniform frequency so low bands are not starved
        freq = float(np.exp(rng.uniform(np.log(F_LOW), np.log(F_HIGH))))
        amp = float(rng.uniform(0.2, 1.0))
        onset = float(rng.uniform(0.0, 0.5 * seconds))
        phase = float(rng.uniform(0, 2 * np.pi))
        on = t >= onset
        x += np.where(on, amp * np.sin(2 * np.pi * freq * t + phase), 0.0)
        energies.append(amp * amp * on.sum())
        freqs.append(freq)
    if noise:
        snr_db = float(rng.uniform(10.0, 30.0))
        p_sig = np.mean(x * x)
        x += rng.generator.standard_normal(n) * np.sqrt(p_sig / 10 ** (snr_db / 10))
    x *= PEAK / max(np.abs(x).max(), 1e-12)
    label = band_of(freqs[int(np.argmax(energies))], n_classes)
    return Clip(clip_id, x.astype(np.float32), label, tuple(freqs))


def synth_dataset(n_clips: int, seed: int, n_classes: int = 4) -> Dataset:
    if n_clips < 1:
        raise ValueError("synth_dataset: need at least one clip")
    rng = Rng(seed, "data/synth")
    clips = [synth_clip(rng, n_classes, clip_id=f"synth-{i:05d}") for i in range(n_clips)]
    return Dataset(clips, n_classes)


def load_audio_dir(path: str | os.PathLike) -> Dataset:
    """Every *.wav under ``path`` (sorted), unlabeled."""
    files = sorted(Path(path).rglob("*.wav"))
    if not files:
        raise FileNotFoundError(f"no .wav files under {path}")
    return Dataset([Clip(f.relative_to(path).as_posix(), load_wav(f)[0], -1) for f in files])


def random_crop(x: np.ndarray, length: int, rng: Rng) -> np.ndarray:
    """Random window of ``length`` samples; shorter clips are reflect-padded."""
    if len(x) < length:
        return np.pad(x, (0, length - len(x)), mode="reflect" if len(x) > 1 else "constant")
    start = int(rng.integers(0, len(x) - length + 1))
    return x[start:start + length]
