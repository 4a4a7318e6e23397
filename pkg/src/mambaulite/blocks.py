"""Axial depthwise convolution, the P-Mamba block, encoder stages and the decoder block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import attention_gate, init_attention_gate
from .config import ModelConfig
from .errors import ConfigurationError
from .params import ParamView, add_conv, add_norm, fan_in_uniform
from .ssm import init_vss, vss_block
from .tensor import Tensor
from .tensor import ops


@dataclass
class EncoderStageIO:
    out: Tensor
    skip: Tensor


def _bn(x: Tensor, p: ParamView, name: str, training: bool) -> Tensor:
    return ops.normalize(x, "batch", p[f"{name}.gamma"], p[f"{name}.beta"],
                         running_stats=p.running(name), mode="train" if training else "eval")


# ---------------------------------------------------------------------------
# axial depthwise


def init_axial(p: ParamView, rng: np.random.Generator, channels: int, k: int) -> None:
    if k % 2 == 0:
        raise ConfigurationError(f"axial kernel must be odd, got {k}")
    p.add("h.w", fan_in_uniform(rng, (channels, 1, 1, k), fan_in=k))
    p.add("v.w", fan_in_uniform(rng, (channels, 1, k, 1), fan_in=k))
    p.add("b", np.zeros(channels))


def axial_dw(x: Tensor, p: ParamView) -> Tensor:
    """Parallel 1xk and kx1 depthwise convolutions plus one shared bias."""
    k = p["h.w"].shape[-1]
    if k % 2 == 0 or p["v.w"].shape[-2] != k:
        raise ConfigurationError(f"axial kernels must be odd and matching, got {p['h.w'].shape}, {p['v.w'].shape}")
    r = k // 2
    horiz = ops.depthwise_conv2d(x, p["h.w"], padding=(0, r))
    vert = ops.depthwise_conv2d(x, p["v.w"], padding=(r, 0))
    c = x.shape[1]
    return ops.add(ops.add(horiz, vert), ops.reshape(p["b"], (1, c, 1, 1)))


# ---------------------------------------------------------------------------
# P-Mamba


def init_pmamba(p: ParamView, rng: np.random.Generator, channels: int, cfg: ModelConfig) -> None:
    c = channels
    if c % 2:
        raise ConfigurationError(f"P-Mamba needs an even channel count, got {c}")
    p.add("dw.w", fan_in_uniform(rng, (c, 1, 3, 3)))
    p.add("dw.b", np.zeros(c))
    for i in range(2):
        init_vss(p.sub(f"vss{i}"), rng, c // 2, cfg.d_state, cfg.expand, cfg.dt_rank_rule)
    add_norm(p, "inorm", c)
    add_conv(p, "pool_conv", rng, c, 2 * c, 3)


def pmamba_branches(x: Tensor, p: ParamView) -> tuple[Tensor, Tensor]:
    """Return (vss branch, pooled sigmoid branch) before fusion."""
    t = ops.depthwise_conv2d(x, p["dw.w"], p["dw.b"])
    halves = ops.split_channels(t, 2)
    feats = ops.concat_channels([vss_block(h, p.sub(f"vss{i}")) for i, h in enumerate(halves)])
    b1 = ops.relu(ops.normalize(feats, "instance", p["inorm.gamma"], p["inorm.beta"]))
    pooled = ops.concat_channels([ops.pool2d(x, "avg", 3, 1, 1), ops.pool2d(x, "max", 3, 1, 1)])
    b2 = ops.sigmoid(ops.conv2d(pooled, p["pool_conv.w"], p["pool_conv.b"], padding=1))
    return b1, b2


def p_mamba(x: Tensor, p: ParamView, fusion: str = "sum") -> Tensor:
    if x.shape[1] % 2:
        raise ConfigurationError(f"P-Mamba needs an even channel count, got {x.shape[1]}")
    b1, b2 = pmamba_branches(x, p)
    if fusion == "sum":
        return ops.add(b1, b2)
    if fusion == "mul":
        return ops.mul(b1, b2)
    raise ConfigurationError(f"unknown P-Mamba fusion {fusion!r}")


# ---------------------------------------------------------------------------
# encoders


def _init_encoder_tail(p: ParamView, rng, c: int, k: int) -> None:
    init_axial(p.sub("axial"), rng, c, k)
    add_norm(p, "bn", c, running=True)
    add_conv(p, "pw", rng, 2 * c, c)


def _encoder_tail(t: Tensor, p: ParamView, training: bool) -> EncoderStageIO:
    t = ops.relu(_bn(axial_dw(t, p.sub("axial")), p, "bn", training))
    out = ops.pool2d(ops.pointwise_conv(t, p["pw.w"], p["pw.b"]), "max", 2, 2)
    return EncoderStageIO(out=out, skip=t)


def init_pe_block(p: ParamView, rng: np.random.Generator, channels: int, cfg: ModelConfig) -> None:
    init_pmamba(p.sub("pmamba"), rng, channels, cfg)
    _init_encoder_tail(p, rng, channels, 3)


def pe_block(x: Tensor, p: ParamView, training: bool = True, fusion: str = "sum") -> EncoderStageIO:
    return _encoder_tail(p_mamba(x, p.sub("pmamba"), fusion), p, training)


def init_ae_block(p: ParamView, rng: np.random.Generator, channels: int) -> None:
    _init_encoder_tail(p, rng, channels, 7)


def ae_block(x: Tensor, p: ParamView, training: bool = True) -> EncoderStageIO:
    return _encoder_tail(x, p, training)


# ---------------------------------------------------------------------------
# decoder


def init_decoder_block(p: ParamView, rng: np.random.Generator, c_prev: int, c_skip: int,
                       cfg: ModelConfig) -> None:
    init_attention_gate(p.sub("ag"), rng, c_prev, c_skip, max(1, c_skip // cfg.ag_width_divisor))
    add_conv(p, "pw1", rng, c_skip, c_skip + c_prev)
    add_norm(p, "bn", c_skip, running=True)
    add_conv(p, "pw2", rng, c_skip, c_skip)
    init_axial(p.sub("axial"), rng, c_skip, 7)


def decoder_block(prev: Tensor, skip: Tensor, p: ParamView, training: bool = True) -> Tensor:
    u = ops.resize_bilinear(prev, skip.shape[2], skip.shape[3])
    a = attention_gate(u, skip, p.sub("ag"))
    m = ops.concat_channels([a, u])
    y = ops.pointwise_conv(m, p["pw1.w"], p["pw1.b"])
    y = ops.relu(_bn(y, p, "bn", training))
    y = ops.pointwise_conv(y, p["pw2.w"], p["pw2.b"])
    return axial_dw(y, p.sub("axial"))
