import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from axlstm.numcore import Rng, Tensor, default_dtype
from axlstm.numcore import sum as tsum
from axlstm.specfeat import (
    SAMPLE_RATE, PatchConfig, PatchShapeError, UnsupportedCodecError, WavParseError, build_encoder_input,
    empty_plan, load_spectrogram, load_wav, logmel, mask_count, mel_centers, mel_filterbank, patchify,
    posemb_2d, posemb_with_cls, sample_mask, sample_mask_batch, save_spectrogram, unpatchify, write_wav,
)

PATCH_SIZES = [PatchConfig(8, 16), PatchConfig(4, 16), PatchConfig(4, 8)]


def tone(freq, seconds=2.0, amp=0.5):
    t = np.arange(int(seconds * SAMPLE_RATE)) / SAMPLE_RATE
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


# -- wav io -------------------------------------------------------------------------

def test_wav_float32_round_trip_is_exact(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 1234).astype(np.float32)
    write_wav(tmp_path / "a.wav", x, fmt="float32")
    y, sr = load_wav(tmp_path / "a.wav")
    assert sr == SAMPLE_RATE and np.array_equal(x, y)


def test_wav_pcm16_round_trip_within_quantization(tmp_path):
    x = tone(440.0, 0.1)
    write_wav(tmp_path / "a.wav", x)
    y, _ = load_wav(tmp_path / "a.wav")
    assert np.abs(x - y).max() < 2 / 32768


def test_wav_stereo_is_averaged_and_resampled(tmp_path):
    left = np.full(800, 0.5, np.float32)
    write_wav(tmp_path / "s.wav", np.stack([left, -left * 0.5], 1), sr=8000, fmt="float32")
    y, sr = load_wav(tmp_path / "s.wav")
    assert sr == SAMPLE_RATE and len(y) == 1600
    assert np.allclose(y, 0.125)


def test_wav_errors(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFX" + b"\0" * 40)
    with pytest.raises(WavParseError) as info:
        load_wav(tmp_path / "bad.wav")
    assert info.value.offset == 0
    fmt = struct.pack("<4sIHHIIHH", b"fmt ", 16, 1, 1, 16000, 48000, 3, 24)
    body = b"WAVE" + fmt + struct.pack("<4sI", b"data", 6) + b"\0" * 6
    (tmp_path / "pcm24.wav").write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(UnsupportedCodecError) as info:
        load_wav(tmp_path / "pcm24.wav")
    assert info.value.bits == 24


# -- log-mel ------------------------------------------------------------------------

def test_two_second_clip_gives_200_by_80():
    assert logmel(tone(1000.0)).shape == (200, 80)
    assert logmel(np.zeros((3, 32000), np.float32)).shape == (3, 200, 80)


def test_logmel_silence_hits_the_floor():
    assert np.allclose(logmel(np.zeros(16000, np.float32)), np.log(1e-5), atol=1e-6)


def test_logmel_rejects_other_rates_and_empty_input():
    with pytest.raises(ValueError):
        logmel(tone(440.0), sr=44100)
    with pytest.raises(ValueError):
        logmel(np.zeros(0, np.float32))


def test_filterbank_shape_and_unit_peaks():
    fb = mel_filterbank()
    assert fb.shape == (201, 80)
    assert np.all(fb >= 0) and fb.max() <= 1.0
    assert np.all(fb.sum(axis=0) > 0)  # no empty filter at 400-point FFT resolution
    assert not fb.flags.writeable


@pytest.mark.parametrize("freq", [300.0, 1000.0, 2500.0, 5000.0])
def test_pure_tone_lands_in_nearest_mel_band(freq):
    spec = logmel(tone(freq))
    peak = int(np.argmax(spec[50:150].mean(axis=0)))
    nearest = int(np.argmin(np.abs(mel_centers() - freq)))
    assert abs(peak - nearest) <= 1


def test_spectrogram_dump_round_trip(tmp_path):
    spec = logmel(tone(700.0))
    save_spectrogram(tmp_path / "s.f32", spec)
    assert np.array_equal(load_spectrogram(tmp_path / "s.f32"), spec)
    (tmp_path / "t.f32").write_bytes((tmp_path / "s.f32").read_bytes()[:-4])
    with pytest.raises(ValueError, match="size mismatch"):
        load_spectrogram(tmp_path / "t.f32")


# -- patches ------------------------------------------------------------------------

@pytest.mark.parametrize("cfg,count", list(zip(PATCH_SIZES, [125, 250, 500])))
def test_patch_counts(cfg, count):
    assert cfg.num_patches(200, 80) == count
    assert patchify(np.zeros((200, 80)), cfg).shape == (count, cfg.size)


def test_patchify_is_time_major():
    spec = np.arange(8 * 4, dtype=np.float32).reshape(8, 4)
    p = patchify(spec, PatchConfig(2, 2))
    assert p.shape == (8, 4)
    assert np.array_equal(p[0], [0, 1, 4, 5])
    assert np.array_equal(p[1], [2, 3, 6, 7])  # second frequency column of the first time row
    assert np.array_equal(p[2], [8, 9, 12, 13])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2))
def test_patchify_unpatchify_round_trip(t, f, gh, gw, lead):
    cfg = PatchConfig(t, f)
    spec = np.random.default_rng(t * 100 + f).normal(size=(2,) * lead + (gh * t, gw * f)).astype(np.float32)
    assert np.array_equal(unpatchify(patchify(spec, cfg), cfg, (gh, gw)), spec)


def test_patchify_rejects_indivisible_shapes():
    with pytest.raises(PatchShapeError, match="crop to 200x80"):
        patchify(np.zeros((203, 80)), PatchConfig(4, 16))


def test_posemb_values():
    table = posemb_2d(50, 5, 8)
    # row 1, column 2 -> [sin(r w), cos(r w)] for the row half, same for the column half, w = (1, 1/100)
    expected = np.array([np.sin(1), np.sin(0.01), np.cos(1), np.cos(0.01),
                         np.sin(2), np.sin(0.02), np.cos(2), np.cos(0.02)], np.float32)
    assert np.allclose(table[7], expected, atol=1e-7)
    assert np.array_equal(table[0], [0, 0, 1, 1, 0, 0, 1, 1])
    assert table.shape == (250, 8)
    assert len({row.tobytes() for row in posemb_2d(50, 5, 192)}) == 250


def test_posemb_cls_row_and_validation():
    assert np.array_equal(posemb_with_cls(2, 2, 8)[0], np.zeros(8))
    with pytest.raises(ValueError):
        posemb_2d(2, 2, 6)
    a = posemb_2d(3, 3, 8)
    a[:] = 0  # copies leave the cached table intact
    assert posemb_2d(3, 3, 8)[0, 2] == 1.0


# -- masking ------------------------------------------------------------------------

def test_mask_count_rounds_half_up():
    assert [mask_count(n, 0.5) for n in (1, 3, 6, 125, 250, 500)] == [1, 2, 3, 63, 125, 250]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 600), st.floats(0.01, 0.99), st.integers(0, 1000))
def test_sample_mask_cardinality(n, ratio, seed):
    plan = sample_mask(n, ratio, Rng(seed))
    assert plan.masked.sum() == mask_count(n, ratio) == plan.count


def test_sample_mask_is_uniform():
    hits = sum(sample_mask(10, 0.3, Rng(s)).masked.astype(int) for s in range(2000))
    assert np.all(np.abs(hits / 2000 - 0.3) < 0.05)


def test_sample_mask_validation_and_batches():
    with pytest.raises(ValueError):
        sample_mask(0, 0.5, Rng(0))
    with pytest.raises(ValueError):
        sample_mask(10, 1.0, Rng(0))
    plans = sample_mask_batch(4, 250, 0.5, Rng(1))
    assert plans.masked.shape == (4, 250) and np.all(plans.masked.sum(1) == 125)
    assert len({row.tobytes() for row in plans.masked}) == 4


# -- encoder input ------------------------------------------------------------------

def _embed(d=8, P=4, seed=0):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(P, d)), requires_grad=True), Tensor(rng.normal(size=d), requires_grad=True),
            Tensor(rng.normal(size=d), requires_grad=True), Tensor(rng.normal(size=d), requires_grad=True))


def test_build_encoder_input_layout():
    with default_dtype(np.float64):
        W, b, cls, mask = _embed()
        raw = np.random.default_rng(1).normal(size=(6, 4))
        plan = sample_mask(6, 0.5, Rng(2))
        pos = posemb_with_cls(3, 2, 8)
        seq = build_encoder_input(raw, plan, W, b, cls, mask, pos)
        tok = seq.tokens.data
        assert tok.shape == (7, 8)
        assert np.allclose(tok[0], cls.data)
        for i in range(6):
            body = mask.data if plan.masked[i] else raw[i].astype(np.float32) @ W.data + b.data
            assert np.allclose(tok[i + 1], body + pos[i + 1], atol=1e-6)


def test_masked_patch_content_never_reaches_tokens():
    with default_dtype(np.float64):
        W, b, cls, mask = _embed()
        raw = np.random.default_rng(1).normal(size=(2, 6, 4))
        plan = sample_mask_batch(2, 6, 0.5, Rng(3))
        pos = posemb_with_cls(3, 2, 8)
        a = build_encoder_input(raw, plan, W, b, cls, mask, pos).tokens.data
        raw2 = np.where(plan.masked[..., None], 1e3, raw)
        assert np.array_equal(a, build_encoder_input(raw2, plan, W, b, cls, mask, pos).tokens.data)


def test_encoder_input_gradients_reach_tokens():
    W, b, cls, mask = _embed()
    plan = sample_mask(6, 0.5, Rng(4))
    seq = build_encoder_input(np.ones((6, 4)), plan, W, b, cls, mask, posemb_with_cls(3, 2, 8))
    tsum(seq.tokens).backward()
    assert np.allclose(mask.grad, 3.0) and np.allclose(cls.grad, 1.0) and np.allclose(b.grad, 3.0)


def test_build_encoder_input_shape_errors():
    W, b, cls, mask = _embed()
    with pytest.raises(ValueError, match="positional"):
        build_encoder_input(np.ones((6, 4)), empty_plan(6), W, b, cls, mask, posemb_with_cls(2, 2, 8))
    with pytest.raises(ValueError, match="mask plan"):
        build_encoder_input(np.ones((6, 4)), empty_plan(5), W, b, cls, mask, posemb_with_cls(3, 2, 8))
