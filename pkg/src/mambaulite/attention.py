"""Multiplicative attention gates: CBAM skips, decoder attention gate, ICSA bottleneck."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DimensionError
from .params import ParamView, add_conv, fan_in_uniform
from .tensor import Tensor
from .tensor import ops


def _global_max(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.reshape(ops.amax(ops.reshape(x, (n, c, h * w)), axis=2), (n, c, 1, 1))


# ---------------------------------------------------------------------------
# CBAM


def init_cbam(p: ParamView, rng: np.random.Generator, channels: int, reduction: int = 4) -> None:
    if channels < reduction or channels % reduction:
        raise ConfigurationError(f"CBAM reduction {reduction} must divide channel count {channels}")
    hidden = channels // reduction
    add_conv(p, "fc1", rng, hidden, channels)
    add_conv(p, "fc2", rng, channels, hidden)
    add_conv(p, "spatial", rng, 1, 2, 7)


def _cbam_mlp(v: Tensor, p: ParamView) -> Tensor:
    v = ops.relu(ops.pointwise_conv(v, p["fc1.w"], p["fc1.b"]))
    return ops.pointwise_conv(v, p["fc2.w"], p["fc2.b"])


def cbam(x: Tensor, p: ParamView) -> Tensor:
    """Channel attention followed by 7x7 spatial attention."""
    c = x.shape[1]
    if p["fc1.w"].shape[1] != c:
        raise ConfigurationError(f"CBAM built for {p['fc1.w'].shape[1]} channels, got {c}")
    avg = ops.mean(x, (2, 3))
    mx = _global_max(x)
    gate_c = ops.sigmoid(ops.add(_cbam_mlp(avg, p), _cbam_mlp(mx, p)))
    xc = ops.mul(x, gate_c)
    desc = ops.concat([ops.mean(xc, 1), ops.amax(xc, 1)], axis=1)
    gate_s = ops.sigmoid(ops.conv2d(desc, p["spatial.w"], p["spatial.b"], padding=3))
    return ops.mul(xc, gate_s)


# ---------------------------------------------------------------------------
# Attention gate


def ag_width(c_skip: int) -> int:
    return max(1, c_skip // 2)


def init_attention_gate(p: ParamView, rng: np.random.Generator, c_gate: int, c_skip: int,
                        f_int: int | None = None) -> None:
    f_int = ag_width(c_skip) if f_int is None else f_int
    if f_int < 1:
        raise ConfigurationError("attention gate width must be >= 1")
    add_conv(p, "proj_g", rng, f_int, c_gate)
    add_conv(p, "proj_x", rng, f_int, c_skip)
    add_conv(p, "head", rng, 1, f_int)


def attention_gate(gate: Tensor, skip: Tensor, p: ParamView) -> Tensor:
    if gate.shape[0] != skip.shape[0] or gate.shape[2:] != skip.shape[2:]:
        raise DimensionError(f"attention gate: gate {gate.shape} and skip {skip.shape} differ in (n, h, w)")
    a = ops.add(ops.pointwise_conv(gate, p["proj_g.w"], p["proj_g.b"]),
                ops.pointwise_conv(skip, p["proj_x.w"], p["proj_x.b"]))
    psi = ops.sigmoid(ops.pointwise_conv(ops.relu(a), p["head.w"], p["head.b"]))
    return ops.mul(skip, psi)


# ---------------------------------------------------------------------------
# ICSA = PCA -> PCA -> PSA


def init_pca(p: ParamView, rng: np.random.Generator, channels: int) -> None:
    p.add("dw.w", fan_in_uniform(rng, (channels, 1, 3, 3)))
    p.add("dw.b", np.zeros(channels))


def pca(x: Tensor, p: ParamView) -> Tensor:
    """Per-channel gate from the spatial mean of a depthwise 3x3 response."""
    d = ops.mean(ops.depthwise_conv2d(x, p["dw.w"], p["dw.b"]), (2, 3))
    return ops.mul(x, ops.sigmoid(d))


def init_psa(p: ParamView, rng: np.random.Generator, channels: int) -> None:
    add_conv(p, "pw", rng, 1, channels)


def psa(x: Tensor, p: ParamView) -> Tensor:
    """Per-pixel gate from a pointwise c -> 1 projection."""
    return ops.mul(x, ops.sigmoid(ops.pointwise_conv(x, p["pw.w"], p["pw.b"])))


def init_icsa(p: ParamView, rng: np.random.Generator, channels: int) -> None:
    init_pca(p.sub("pca1"), rng, channels)
    init_pca(p.sub("pca2"), rng, channels)
    init_psa(p.sub("psa"), rng, channels)


def icsa(x: Tensor, p: ParamView) -> Tensor:
    return psa(pca(pca(x, p.sub("pca1")), p.sub("pca2")), p.sub("psa"))
