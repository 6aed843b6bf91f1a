import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from axlstm.cli.selftest import block_grad_error, micro_config, pipeline_grad_error
from axlstm.encoder import (REFERENCE_PARAMS_M, ConfigError, EncoderConfig, EncoderError, causal_conv1d, count_params,
                            embed_patches, encode, flip_sequence, headwise_linear, init_params, mlstm_block_forward,
                            param_breakdown, param_shapes)
from axlstm.numcore import Rng, Tensor, default_dtype, grad_check, no_grad
from axlstm.numcore import sum as tsum
from axlstm.specfeat import PatchConfig, empty_plan, sample_mask


def _block_count(d, ef, heads=4, bs=4, K=4):
    inner = ef * d
    return (2 * d                         # pre-norm
            + d * 2 * inner + 2 * inner   # up-projection to [x_m | z]
            + K * inner + inner           # causal conv
            + 3 * (inner * bs + inner)    # headwise q, k, v with biases
            + 2 * (3 * inner * heads + heads)  # input and forget gates
            + 3 * inner                   # group-norm scale, bias, skip
            + inner * d + d)              # down-projection


def test_block_count_matches_closed_form():
    cfg = EncoderConfig.from_variant("tiny")
    assert _block_count(192, 3) == 360_584
    assert param_breakdown(cfg)["blocks.0"] == 360_584
    frame = 64 * 192 + 192 + 2 * 192 + 2 * 192  # patch embedding, cls/mask tokens, final norm
    assert count_params(cfg) == 12 * 360_584 + frame


@pytest.mark.parametrize("variant,ef,frozen", [
    ("tiny", 2, 2_900_256), ("tiny", 3, 4_340_256), ("tiny", 4, 5_780_256),
    ("small", 3, 16_643_040), ("base", 3, 65_136_480),
])
def test_reference_parameter_counts(variant, ef, frozen):
    cfg = EncoderConfig.from_variant(variant, expansion=ef)
    n = count_params(cfg)
    assert n == frozen
    assert abs(n / (REFERENCE_PARAMS_M[(variant, ef)] * 1e6) - 1) <= 0.25


def test_expansion_ratio():
    c2, c4 = (count_params(EncoderConfig.from_variant("tiny", expansion=e)) for e in (2, 4))
    assert abs(c4 / c2 - 2.0) <= 0.2


def test_head_is_excluded_from_count_by_default():
    cfg = EncoderConfig.from_variant("tiny")
    assert count_params(cfg, include_head=True) - count_params(cfg) == 192 * 192 + 192 + 192 * 64 + 64


@pytest.mark.parametrize("bad", [
    dict(d_m=30), dict(depth=-1), dict(expansion=0), dict(heads=7), dict(gate_type="tanh"),
    dict(flip_policy="random"), dict(conv_kernel=0), dict(d_m=4, expansion=1, qkv_blocksize=3, heads=1),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        EncoderConfig(**bad)
    with pytest.raises(ConfigError):
        EncoderConfig.from_variant("huge")


def test_config_dict_round_trip_and_alternating_flip():
    cfg = EncoderConfig.from_variant("small", flip_policy="alternating")
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    assert [cfg.block(i).flip for i in range(4)] == [True, False, True, False]
    assert not any(EncoderConfig().block(i).flip for i in range(12))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 5), st.booleans())
def test_flip_is_an_involution(n, d, include_cls):
    x = Tensor(np.random.default_rng(n * 10 + d).normal(size=(2, n, d)))
    once = flip_sequence(x, include_cls).data
    assert np.array_equal(flip_sequence(flip_sequence(x, include_cls), include_cls).data, x.data)
    if include_cls:
        assert np.array_equal(once, x.data[:, ::-1])
    else:
        assert np.array_equal(once[:, 0], x.data[:, 0])
        assert np.array_equal(once[:, 1:], x.data[:, 1:][:, ::-1])


def test_causal_conv_matches_direct_sum_and_is_causal():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 9, 5))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=5)
    with default_dtype(np.float64):
        y = causal_conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        expected = np.tile(b, (2, 9, 1))
        for t in range(9):
            for j in range(4):
                s = t - 3 + j
                if s >= 0:
                    expected[:, t] += w[j] * x[:, s]
        assert np.allclose(y, expected, atol=1e-12)
        x2 = x.copy()
        x2[:, 6:] += 5.0
        assert np.array_equal(causal_conv1d(Tensor(x2), Tensor(w), Tensor(b)).data[:, :6], y[:, :6])
        for slot, arr in enumerate((x, w, b)):
            def f(t, slot=slot):
                args = [Tensor(a) for a in (x, w, b)]
                args[slot] = t
                return tsum(causal_conv1d(*args) * np.cos(np.arange(5.0)))
            assert grad_check(f, Tensor(arr)) < 1e-7


def test_headwise_linear_is_block_diagonal():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3, 2, 2))
    x = rng.normal(size=(4, 6))
    dense = np.zeros((6, 6))
    for i in range(3):
        dense[2 * i:2 * i + 2, 2 * i:2 * i + 2] = W[i]
    with default_dtype(np.float64):
        assert np.allclose(headwise_linear(Tensor(x), Tensor(W)).data, x @ dense)
        assert grad_check(lambda t: tsum(headwise_linear(t, Tensor(W)) * x), Tensor(x)) < 1e-7
        assert grad_check(lambda t: tsum(headwise_linear(Tensor(x), t) * x), Tensor(W)) < 1e-7


def test_init_values():
    cfg = micro_config()
    params = init_params(cfg, PatchConfig(), Rng(0))
    assert set(params) == set(param_shapes(cfg, PatchConfig()))
    assert np.all(params["blocks.0.skip"].data == 1) and np.all(params["blocks.1.gn.w"].data == 1)
    assert np.all(params["blocks.0.igate.W"].data == 0) and np.all(params["blocks.0.up.b"].data == 0)
    assert np.allclose(params["blocks.0.fgate.b"].data, -np.logaddexp(0, -np.array([3.0, 6.0])), atol=1e-7)
    assert np.abs(params["patch_embed.W"].data).max() <= 0.04
    assert all(p.dtype == np.float32 and p.requires_grad for p in params.values())


def _micro_tokens(cfg, patch=PatchConfig(4, 16), seed=0, batch=None):
    rng = Rng(seed)
    params = init_params(cfg, patch, rng, std=0.2)
    lead = () if batch is None else (batch,)
    raw = rng.normal(lead + (6, patch.size), 1.0)
    plan = empty_plan(6, batch)
    return params, embed_patches(raw, plan, params, cfg, (3, 2)).tokens


@pytest.mark.parametrize("gate_type", ["exponential", "sigmoid"])
@pytest.mark.parametrize("flip", ["none", "alternating"])
def test_parallel_and_recurrent_encoders_agree(gate_type, flip):
    cfg = micro_config(gate_type, flip, depth=3)
    params, tokens = _micro_tokens(cfg, batch=2)
    with no_grad():
        a = encode(tokens, cfg, params, "parallel").data
        b = encode(tokens, cfg, params, "recurrent").data
    assert np.abs(a - b).max() <= 1e-4 * max(1.0, np.abs(b).max())


def test_batch_rows_are_independent():
    cfg = micro_config()
    params, tokens = _micro_tokens(cfg, batch=3)
    with no_grad():
        full = encode(tokens, cfg, params).data
        one = encode(Tensor(tokens.data[1]), cfg, params).data
    assert np.allclose(full[1], one, atol=1e-5)


def test_unflipped_block_is_causal_and_flipped_block_anticausal():
    cfg = micro_config(flip_policy="alternating", depth=1)
    rng = Rng(3)
    params = init_params(cfg, PatchConfig(), rng, std=0.2)
    x = rng.normal((7, 16), 1.0)
    x2 = x.copy()
    x2[5] += 3.0
    with no_grad():
        for flip, untouched in ((False, slice(0, 5)), (True, slice(6, 7))):
            bcfg = cfg.block(1 if not flip else 0)
            y1 = mlstm_block_forward(Tensor(x), bcfg, params, "blocks.0.").data
            y2 = mlstm_block_forward(Tensor(x2), bcfg, params, "blocks.0.").data
            assert np.array_equal(y1[untouched], y2[untouched])
            assert not np.allclose(y1[5], y2[5])


def test_block_gradient():
    assert block_grad_error() <= 1e-3
    assert block_grad_error(1, "sigmoid", flip=True) <= 1e-3


def test_pipeline_gradient():
    assert pipeline_grad_error() <= 1e-3


def test_encoder_errors_name_the_block():
    cfg = micro_config()
    params, tokens = _micro_tokens(cfg)
    del params["blocks.1.conv.w"]
    with pytest.raises(EncoderError, match="block 1"):
        encode(tokens, cfg, params)
    with pytest.raises(ValueError):
        encode(Tensor(np.ones((3, 8))), cfg, params)


def test_mask_token_changes_encoding_only_through_masked_rows():
    cfg = micro_config()
    rng = Rng(4)
    patch = PatchConfig(4, 16)
    params = init_params(cfg, patch, rng, std=0.2)
    raw = rng.normal((6, patch.size), 1.0)
    plan = sample_mask(6, 0.5, rng)
    with no_grad():
        before = encode(embed_patches(raw, plan, params, cfg, (3, 2)).tokens, cfg, params).data
        raw2 = raw.copy()
        raw2[plan.masked] = 0.0
        after = encode(embed_patches(raw2, plan, params, cfg, (3, 2)).tokens, cfg, params).data
    assert np.array_equal(before, after)
