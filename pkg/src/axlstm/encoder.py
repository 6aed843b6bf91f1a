"""mLSTM blocks and the stacked AxLSTM encoder (Tiny / Small / Base).

Block layout (pre-norm residual)::

    [x_m | z] = Up(LN(x))                   # Up: d_m -> 2 * E_f * d_m
    c        = silu(CausalConv(x_m))        # depthwise, kernel 4
    q, k     = headwise linears of c        # block-diagonal, small blocks
    v        = headwise linear of x_m
    i, f     = per-head scalars, linear in [q, k, v]
    y = x + Down( (GN(mLSTM(q, k, v, i, f)) + skip * c) * sigmoid(z) )

The z half of the up-projection is the output gate. With ``flip`` the branch
sees the token order reversed and its output is reversed back, so the
causal convolution then looks the other way.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .mlstm import GATE_TYPES, log_gates, parallel_cell, recurrent_cell
from .numcore import (
    Rng, ShapeError, Tensor, concat, layer_norm, make_op, reshape, reverse, sigmoid, silu,
    slice_axis, swapaxes,
)
from .numcore.tensor import _lift
from .specfeat import MaskPlan, PatchConfig, PatchSequence, build_encoder_input, posemb_with_cls

FLIP_POLICIES = ("none", "alternating")

VARIANTS = {
    "tiny": dict(d_m=192, depth=12),
    "small": dict(d_m=384, depth=12),
    "base": dict(d_m=768, depth=12),
}

# Reported sizes (millions of parameters) used by calibration output.
REFERENCE_PARAMS_M = {("tiny", 2): 2.9, ("tiny", 3): 4.3, ("tiny", 4): 5.8, ("small", 3): 16.7, ("base", 3): 65.6}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    d_m: int
    expansion: int = 3
    heads: int = 4
    flip: bool = False
    gate_type: str = "exponential"
    qkv_blocksize: int = 4
    flip_cls: bool = True
    conv_kernel: int = 4

    @property
    def inner(self) -> int:
        return self.expansion * self.d_m

    @property
    def head_dim(self) -> int:
        return self.inner // self.heads


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "tiny"
    d_m: int = 192
    depth: int = 12
    expansion: int = 3
    heads: int = 4
    gate_type: str = "exponential"
    flip_policy: str = "none"
    qkv_blocksize: int = 4
    flip_cls: bool = True
    conv_kernel: int = 4

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d_m <= 0 or self.d_m % 4:
            raise ConfigError(f"d_m must be a positive multiple of 4, got {self.d_m}")
        if self.depth < 0:
            raise ConfigError(f"depth must be >= 0, got {self.depth}")
        if self.expansion < 1:
            raise ConfigError(f"expansion factor must be >= 1, got {self.expansion}")
        inner = self.expansion * self.d_m
        if self.heads < 1 or inner % self.heads:
            raise ConfigError(f"E_f*d_m = {inner} is not divisible by heads = {self.heads}")
        if inner % self.qkv_blocksize:
            raise ConfigError(f"E_f*d_m = {inner} is not divisible by qkv block size {self.qkv_blocksize}")
        if self.conv_kernel < 1:
            raise ConfigError(f"conv_kernel must be >= 1, got {self.conv_kernel}")
        if self.gate_type not in GATE_TYPES:
            raise ConfigError(f"gate_type must be one of {GATE_TYPES}, got {self.gate_type!r}")
        if self.flip_policy not in FLIP_POLICIES:
            raise ConfigError(f"flip_policy must be one of {FLIP_POLICIES}, got {self.flip_policy!r}")

    @classmethod
    def from_variant(cls, variant: str, **overrides) -> "EncoderConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)} or build a custom config")
        return cls(variant=variant, **{**VARIANTS[variant], **overrides})

    def block(self, index: int) -> BlockConfig:
        flip = self.flip_policy == "alternating" and index % 2 == 0
        return BlockConfig(self.d_m, self.expansion, self.heads, flip, self.gate_type,
                           self.qkv_blocksize, self.flip_cls, self.conv_kernel)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)

    def with_(self, **changes) -> "EncoderConfig":
        return replace(self, **changes)


# -- ops ----------------------------------------------------------------------

def flip_sequence(tokens: Tensor, include_cls: bool = True) -> Tensor:
    """Reverse the token axis (-2). With ``include_cls=False`` row 0 stays in place."""
    tokens = _lift(tokens)
    if include_cls or tokens.shape[-2] <= 1:
        return reverse(tokens, axis=-2)
    n = tokens.shape[-2]
    return concat([slice_axis(tokens, 0, 1, axis=-2),
                   reverse(slice_axis(tokens, 1, n, axis=-2), axis=-2)], axis=-2)


def headwise_linear(x: Tensor, W: Tensor) -> Tensor:
    """Block-diagonal linear map: x (..., nb*bs) with W (nb, bs, bs) -> (..., nb*bs)."""
    x, W = _lift(x), _lift(W)
    nb, bs, bs2 = W.shape
    if bs != bs2 or x.shape[-1] != nb * bs:
        raise ShapeError("headwise_linear", x.shape, W.shape)
    lead = x.shape[:-1]
    xb = np.moveaxis(x.data.reshape(-1, nb, bs), 1, 0)  # (nb, M, bs)
    out = np.moveaxis(xb @ W.data, 0, 1).reshape(*lead, nb * bs)

    def bw(g):
        gb = np.moveaxis(g.reshape(-1, nb, bs), 1, 0)
        gx = np.moveaxis(gb @ np.swapaxes(W.data, -1, -2), 0, 1).reshape(x.shape) if x.requires_grad else None
        gW = np.swapaxes(xb, -1, -2) @ gb if W.requires_grad else None
        return gx, gW

    return make_op("headwise_linear", np.ascontiguousarray(out), (x, W), bw)


def _p(params: dict, key: str) -> Tensor:
    try:
        return params[key]
    except KeyError:
        raise KeyError(f"missing parameter {key!r}") from None


def causal_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Depthwise causal convolution over axis -2: y[t] = b + sum_j w[j] * x[t - K + 1 + j]."""
    x, w, b = _lift(x), _lift(w), _lift(b)
    K, C = w.shape
    if x.shape[-1] != C or b.shape != (C,):
        raise ShapeError("causal_conv1d", x.shape, w.shape, b.shape)
    L = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(K - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(b.data, x.shape).copy()
    for j in range(K):
        out += xp[..., j:j + L, :] * w.data[j]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        flat = g.reshape(-1, C)
        for j in range(K):
            gxp[..., j:j + L, :] += g * w.data[j]
            gw[j] = (xp[..., j:j + L, :].reshape(-1, C) * flat).sum(0)
        return gxp[..., K - 1:, :], gw, flat.sum(0)

    return make_op("causal_conv1d", out, (x, w, b), bw)


def mlstm_branch(xn: Tensor, cfg: BlockConfig, params: dict, prefix: str, form: str = "parallel") -> Tensor:
    """Up-project, causal conv, multi-head mLSTM, group norm, skip, output gate, down-project."""
    inner, H, dh = cfg.inner, cfg.heads, cfg.head_dim
    P = lambda key: _p(params, prefix + key)  # noqa: E731
    u = xn @ P("up.W") + P("up.b")
    xm = slice_axis(u, 0, inner, axis=-1)
    z = slice_axis(u, inner, 2 * inner, axis=-1)
    c = silu(causal_conv1d(xm, P("conv.w"), P("conv.b")))

    q = headwise_linear(c, P("q.W")) + P("q.b")
    k = headwise_linear(c, P("k.W")) + P("k.b")
    v = headwise_linear(xm, P("v.W")) + P("v.b")
    qkv = concat([q, k, v], axis=-1)
    logi, logf = log_gates(swapaxes(qkv @ P("igate.W") + P("igate.b"), -1, -2),
                           swapaxes(qkv @ P("fgate.W") + P("fgate.b"), -1, -2), cfg.gate_type)  # (..., H, L)

    lead = xm.shape[:-1]  # (..., L)
    heads = lambda a: swapaxes(reshape(a, lead + (H, dh)), -3, -2)  # noqa: E731  (..., H, L, dh)
    k = k * (1.0 / math.sqrt(dh))
    if form == "parallel":
        h = parallel_cell(heads(q), heads(k), heads(v), logi, logf)
    elif form == "recurrent":
        h = recurrent_cell(heads(q), heads(k), heads(v), logi, logf,
                           stabilize=cfg.gate_type == "exponential")
    else:
        raise ValueError(f"form must be 'parallel' or 'recurrent', got {form!r}")
    h = layer_norm(swapaxes(h, -3, -2))  # per-head group norm, (..., L, H, dh)
    h = reshape(h, lead + (inner,)) * P("gn.w") + P("gn.b")
    h = (h + P("skip") * c) * sigmoid(z)
    return h @ P("down.W") + P("down.b")


def mlstm_block_forward(x: Tensor, cfg: BlockConfig, params: dict, prefix: str = "",
                        form: str = "parallel") -> Tensor:
    x = _lift(x)
    if x.shape[-1] != cfg.d_m:
        raise ShapeError("mlstm_block", x.shape, (cfg.d_m,), detail="token width must equal d_m")
    xn = layer_norm(x, _p(params, f"{prefix}norm.w"), _p(params, f"{prefix}norm.b"))
    if cfg.flip:
        xn = flip_sequence(xn, cfg.flip_cls)
    out = mlstm_branch(xn, cfg, params, prefix, form)
    if cfg.flip:
        out = flip_sequence(out, cfg.flip_cls)
    return x + out


class EncoderError(RuntimeError):
    pass


def encode(tokens: Tensor, cfg: EncoderConfig, params: dict, form: str = "parallel") -> Tensor:
    """Apply ``cfg.depth`` blocks then a final layer norm: (..., N+1, d_m) -> same shape."""
    x = _lift(tokens)
    if x.shape[-1] != cfg.d_m:
        raise ShapeError("encode", x.shape, (cfg.d_m,), detail="token width must equal d_m")
    for i in range(cfg.depth):
        try:
            x = mlstm_block_forward(x, cfg.block(i), params, f"blocks.{i}.", form)
        except (ShapeError, FloatingPointError, KeyError) as err:
            raise EncoderError(f"block {i}: {err}") from err
    return layer_norm(x, _p(params, "norm.w"), _p(params, "norm.b"))


# -- parameters ------------------------------------------------------------------

def block_param_shapes(cfg: BlockConfig) -> dict[str, tuple]:
    d, inner, H, bs = cfg.d_m, cfg.inner, cfg.heads, cfg.qkv_blocksize
    nb = inner // bs
    return {
        "norm.w": (d,), "norm.b": (d,),
        "up.W": (d, 2 * inner), "up.b": (2 * inner,),
        "conv.w": (cfg.conv_kernel, inner), "conv.b": (inner,),
        "q.W": (nb, bs, bs), "q.b": (inner,),
        "k.W": (nb, bs, bs), "k.b": (inner,),
        "v.W": (nb, bs, bs), "v.b": (inner,),
        "igate.W": (3 * inner, H), "igate.b": (H,),
        "fgate.W": (3 * inner, H), "fgate.b": (H,),
        "gn.w": (inner,), "gn.b": (inner,), "skip": (inner,),
        "down.W": (inner, d), "down.b": (d,),
    }


def param_shapes(cfg: EncoderConfig, patch_cfg: PatchConfig, include_head: bool = True) -> dict[str, tuple]:
    d, P = cfg.d_m, patch_cfg.size
    shapes = {"patch_embed.W": (P, d), "patch_embed.b": (d,), "cls_token": (d,), "mask_token": (d,)}
    for i in range(cfg.depth):
        shapes.update({f"blocks.{i}.{k}": s for k, s in block_param_shapes(cfg.block(i)).items()})
    shapes.update({"norm.w": (d,), "norm.b": (d,)})
    if include_head:
        shapes.update({"head.fc1.W": (d, d), "head.fc1.b": (d,), "head.fc2.W": (d, P), "head.fc2.b": (P,)})
    return shapes


def init_params(cfg: EncoderConfig, patch_cfg: PatchConfig, rng: Rng, include_head: bool = True,
                std: float = 0.02) -> dict[str, Tensor]:
    """Truncated-normal dense weights; unit norm scales and skips; zero biases and gate weights.

    Forget-gate biases start at log(sigmoid(3..6)) across heads, so the
    initial per-step decay spans timescales of roughly 20 to 400 tokens.
    Input-gate biases are N(0, 0.1). Headwise q/k/v blocks use
    std sqrt(2 / (5 * inner)) and the convolution U(-1/sqrt(K), 1/sqrt(K)).
    """
    params = {}
    f_bias = -np.logaddexp(0.0, -np.linspace(3.0, 6.0, cfg.heads)).astype(np.float32)
    qkv_std = math.sqrt(2.0 / (5.0 * cfg.expansion * cfg.d_m))
    for name, shape in param_shapes(cfg, patch_cfg, include_head).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(("norm.w", "gn.w", ".skip")):
            arr = np.ones(shape, np.float32)
        elif name.endswith("fgate.b"):
            arr = f_bias.copy()
        elif name.endswith("igate.b"):
            arr = rng.normal(shape, 0.1)
        elif name.endswith("conv.w"):
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape).astype(np.float32)
        elif "gate." in name or leaf == "b":
            arr = np.zeros(shape, np.float32)
        elif name.endswith(("q.W", "k.W", "v.W")):
            arr = rng.trunc_normal(shape, qkv_std)
        else:
            arr = rng.trunc_normal(shape, std)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def count_params(cfg: EncoderConfig, patch_cfg: PatchConfig = PatchConfig(), include_head: bool = False) -> int:
    return int(sum_sizes(param_shapes(cfg, patch_cfg, include_head)))


def sum_sizes(shapes: dict[str, tuple]) -> int:
    return sum(int(np.prod(s)) for s in shapes.values())


def param_breakdown(cfg: EncoderConfig, patch_cfg: PatchConfig = PatchConfig(),
                    include_head: bool = True) -> dict[str, int]:
    """Counts grouped by module: patch embedding, tokens, one entry per block, final norm, head."""
    groups: dict[str, int] = {}
    for name, shape in param_shapes(cfg, patch_cfg, include_head).items():
        parts = name.split(".")
        if parts[0] == "blocks":
            key = f"blocks.{parts[1]}"
        elif parts[0] in ("cls_token", "mask_token"):
            key = "tokens"
        else:
            key = parts[0]
        groups[key] = groups.get(key, 0) + int(np.prod(shape))
    return groups


# -- embedding --------------------------------------------------------------------

def embed_patches(raw_patches: np.ndarray, plan: MaskPlan, params: dict, cfg: EncoderConfig,
                  grid: tuple[int, int]) -> PatchSequence:
    pos = posemb_with_cls(grid[0], grid[1], cfg.d_m)
    return build_encoder_input(raw_patches, plan, params["patch_embed.W"], params["patch_embed.b"],
                               params["cls_token"], params["mask_token"], pos)
