"""WAV reading/writing (PCM-16 and float-32) without external codecs."""

from __future__ import annotations

import os
import struct

import numpy as np

SAMPLE_RATE = 16000

_PCM = 0x0001
_FLOAT = 0x0003
_EXTENSIBLE = 0xFFFE


class WavParseError(ValueError):
    """Malformed RIFF/WAVE structure; ``offset`` is the byte where parsing failed."""

    def __init__(self, msg: str, offset: int):
        self.offset = offset
        super().__init__(f"{msg} (at byte offset {offset})")


class UnsupportedCodecError(ValueError):
    def __init__(self, fmt_tag: int, bits: int):
        self.fmt_tag = fmt_tag
        self.bits = bits
        super().__init__(f"unsupported WAV codec: format tag 0x{fmt_tag:04x}, {bits} bits per sample "
                         "(PCM-16 and float-32 are supported)")


def _parse(buf: bytes) -> tuple[np.ndarray, int]:
    if len(buf) < 12:
        raise WavParseError("file too short for a RIFF header", len(buf))
    if buf[0:4] != b"RIFF":
        raise WavParseError("missing RIFF magic", 0)
    if buf[8:12] != b"WAVE":
        raise WavParseError("missing WAVE form type", 8)

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(buf):
        cid = buf[pos:pos + 4]
        (size,) = struct.unpack_from("<I", buf, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + 16 > len(buf):
                raise WavParseError("fmt chunk truncated", body)
            tag, channels, rate, _, align, bits = struct.unpack_from("<HHIIHH", buf, body)
            if tag == _EXTENSIBLE:
                if size < 40 or body + 26 > len(buf):
                    raise WavParseError("extensible fmt chunk truncated", body)
                (tag,) = struct.unpack_from("<H", buf, body + 24)
            fmt = (tag, channels, rate, align, bits)
        elif cid == b"data":
            if fmt is None:
                raise WavParseError("data chunk precedes fmt chunk", pos)
            end = body + size
            if end > len(buf):
                # tolerate writers that leave a bogus size, but only on whole frames
                end = len(buf)
            data = buf[body:end]
            break
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavParseError("no fmt chunk found", pos)
    if data is None:
        raise WavParseError("no data chunk found", pos)

    tag, channels, rate, align, bits = fmt
    if channels < 1:
        raise WavParseError("channel count is zero", 22)
    if tag == _PCM and bits == 16:
        samples = np.frombuffer(data[: len(data) - len(data) % 2], dtype="<i2").astype(np.float32) / 32768.0
    elif tag == _FLOAT and bits == 32:
        samples = np.frombuffer(data[: len(data) - len(data) % 4], dtype="<f4").astype(np.float32)
    else:
        raise UnsupportedCodecError(tag, bits)
    frames = len(samples) // channels
    samples = samples[: frames * channels].reshape(frames, channels)
    return samples.mean(axis=1).astype(np.float32), rate


def resample_linear(x: np.ndarray, sr_in: int, sr_out: int = SAMPLE_RATE) -> np.ndarray:
    if sr_in == sr_out or len(x) == 0:
        return x.astype(np.float32)
    n_out = max(1, int(round(len(x) * sr_out / sr_in)))
    t_out = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(t_out, np.arange(len(x)), x).astype(np.float32)


def load_wav(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a WAV file as mono float32 at 16 kHz.

    Channels are averaged; other sample rates are linearly resampled.
    Returns ``(waveform, 16000)``.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    wav, rate = _parse(buf)
    wav = np.clip(wav, -1.0, 1.0)
    return resample_linear(wav, rate, SAMPLE_RATE), SAMPLE_RATE


def write_wav(path: str | os.PathLike, x: np.ndarray, sr: int = SAMPLE_RATE, fmt: str = "pcm16") -> None:
    """Write ``x`` (frames,) or (frames, channels) as PCM-16 or float-32."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if fmt == "pcm16":
        payload = (np.clip(x, -1.0, 1.0) * 32767.0).round().astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif fmt == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        raise ValueError(f"unknown WAV format {fmt!r}")
    align = channels * bits // 8
    header = struct.pack("<4sI4s", b"RIFF", 36 + len(payload), b"WAVE")
    fmt_chunk = struct.pack("<4sIHHIIHH", b"fmt ", 16, tag, channels, sr, sr * align, align, bits)
    data_hdr = struct.pack("<4sI", b"data", len(payload))
    with open(path, "wb") as fh:
        fh.write(header + fmt_chunk + data_hdr + payload)
