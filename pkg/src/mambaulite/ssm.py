"""Selective state-space scan, its four-direction 2D form, and the VSS block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _scan_kernels as kern
from .errors import ConfigurationError, DimensionError
from .params import ParamView, fan_in_uniform
from .tensor import Tensor
from .tensor import ops
from .tensor.core import grad_enabled, record

DECAY_CACHE_BYTES = 512 * 2**20

DIRECTIONS = ("row-forward", "row-backward", "col-forward", "col-backward")


def direction_order(direction: str, h: int, w: int) -> np.ndarray:
    """Row-major pixel index visited at each sequence position."""
    grid = np.arange(h * w).reshape(h, w)
    if direction == "row-forward":
        return grid.reshape(-1)
    if direction == "row-backward":
        return grid.reshape(-1)[::-1].copy()
    if direction == "col-forward":
        return grid.T.reshape(-1)
    if direction == "col-backward":
        return grid.T.reshape(-1)[::-1].copy()
    raise ConfigurationError(f"unknown scan direction {direction!r}")


def discretize(A: np.ndarray, B_t: np.ndarray, delta_t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order hold for the diagonal A, Euler step for B.

    A and B_t are (c, d_state); delta_t is (c,).
    """
    dt = np.asarray(delta_t)[..., None]
    return np.exp(dt * A), dt * B_t


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def scan_core(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable batched selective scan.

    u, delta: (n, K, d, L); A: (K, d, N); B, C: (n, K, N, L); D: (K, d).
    Returns y with the shape of u.
    """
    n, K, d, L = u.shape
    N = A.shape[-1]
    if delta.shape != u.shape:
        raise DimensionError(f"delta shape {delta.shape} != input shape {u.shape}")
    if A.shape != (K, d, N) or D.shape != (K, d):
        raise DimensionError(f"A {A.shape} / D {D.shape} inconsistent with input {u.shape}")
    if B.shape != (n, K, N, L) or C.shape != (n, K, N, L):
        raise DimensionError(f"B {B.shape} / C {C.shape} must be {(n, K, N, L)}")
    dtype = u.dtype
    uu = np.ascontiguousarray(u.data)
    dd = np.ascontiguousarray(delta.data)
    Aa = np.ascontiguousarray(A.data, dtype=np.float64)
    Ad = A.data.astype(dtype)[:, :, None, :]
    Bt = np.ascontiguousarray(np.swapaxes(B.data, 2, 3))
    Ct = np.ascontiguousarray(np.swapaxes(C.data, 2, 3))
    Dd = np.ascontiguousarray(D.data)

    # keep per-element decay factors for the backward pass when they fit the cache budget
    recording = grad_enabled()
    keep = recording and n * K * d * L * N * np.dtype(dtype).itemsize <= DECAY_CACHE_BYTES
    cache = np.empty((n, K, d, L, N), dtype=dtype) if keep else None

    def decay(b):
        out = cache[b] if keep else np.empty((K, d, L, N), dtype=dtype)
        np.multiply(dd[b][..., None], Ad, out=out)
        return np.exp(out, out=out)

    y = np.zeros(u.shape, dtype=dtype)
    if L > 0:
        for b in range(n):
            if recording:
                kern.scan_forward(uu[b], dd[b], decay(b), Bt[b], Ct[b], Dd, y[b])
            else:
                # no backward pass to feed: form the decay inside the kernel
                kern.scan_forward_fused(uu[b], dd[b], np.ascontiguousarray(Ad[:, :, 0, :]), Bt[b], Ct[b], Dd, y[b])
    out = Tensor(y)

    def vjp(g):
        g = np.ascontiguousarray(g)
        du = np.zeros(u.shape, dtype=np.float64)
        ddelta = np.zeros(u.shape, dtype=np.float64)
        gA = np.zeros((K, d, N), dtype=np.float64)
        dBt = np.zeros((n, K, L, N), dtype=np.float64)
        dCt = np.zeros((n, K, L, N), dtype=np.float64)
        dD = np.zeros((K, d), dtype=np.float64)
        if L > 0:
            for b in range(n):
                dA = cache[b] if keep else decay(b)
                kern.scan_backward(uu[b], dd[b], Aa, dA, Bt[b], Ct[b], Dd, g[b],
                                   du[b], ddelta[b], gA, dBt[b], dCt[b], dD)
        return (du.astype(dtype), ddelta.astype(dtype), gA.astype(A.dtype),
                np.swapaxes(dBt, 2, 3).astype(B.dtype), np.swapaxes(dCt, 2, 3).astype(C.dtype),
                dD.astype(D.dtype))

    return record("selective_scan", out, (u, delta, A, B, C, D), vjp)


@dataclass
class ScanParams:
    """Selective-scan parameters; every field may carry a leading direction axis K.

    a_log (c, N), d_skip (c), w_b (N, c), w_c (N, c), w_dt (r, c),
    w_dt_up (c, r), dt_bias (c). ``A = -exp(a_log)``.
    """

    a_log: Tensor
    d_skip: Tensor
    w_b: Tensor
    w_c: Tensor
    w_dt: Tensor
    w_dt_up: Tensor
    dt_bias: Tensor

    @classmethod
    def from_view(cls, p: ParamView) -> "ScanParams":
        return cls(*(p[f] for f in ("a_log", "d_skip", "w_b", "w_c", "w_dt", "w_dt_up", "dt_bias")))

    def tensors(self) -> list[Tensor]:
        return [self.a_log, self.d_skip, self.w_b, self.w_c, self.w_dt, self.w_dt_up, self.dt_bias]


def dt_rank_for(channels: int, rule: int = 8) -> int:
    return max(1, math.ceil(channels / rule))


def init_scan_params(p: ParamView, rng: np.random.Generator, channels: int, d_state: int,
                     dt_rank: int, directions: int = 4, dt_min: float = 1e-3, dt_max: float = 1e-1) -> None:
    """Register one stacked parameter set (leading axis = direction)."""
    K, c, N, r = directions, channels, d_state, dt_rank
    a_log = np.log(np.tile(np.arange(1, N + 1, dtype=np.float64), (K, c, 1)))
    p.add("a_log", a_log)
    p.add("d_skip", np.ones((K, c)))
    p.add("w_b", fan_in_uniform(rng, (K, N, c), fan_in=c))
    p.add("w_c", fan_in_uniform(rng, (K, N, c), fan_in=c))
    p.add("w_dt", fan_in_uniform(rng, (K, r, c), fan_in=c))
    p.add("w_dt_up", fan_in_uniform(rng, (K, c, r), fan_in=r))
    dt = rng.uniform(dt_min, dt_max, size=(K, c))
    p.add("dt_bias", inverse_softplus(dt))


def channel_project(w: Tensor, x: Tensor) -> Tensor:
    """Per-direction channel map: w (K, M, c) applied to x (n, K, c, L).

    The forward pass is independent of L per time step, which keeps the scan
    exactly causal; BLAS would pick different kernels for different L.
    """
    n, K, c, L = x.shape
    if w.ndim != 3 or w.shape[0] != K or w.shape[2] != c:
        raise DimensionError(f"projection {w.shape} incompatible with sequences {x.shape}")
    out = np.zeros((n, K, w.shape[1], L), dtype=np.result_type(w.dtype, x.dtype))
    kern.project_forward(np.ascontiguousarray(w.data, dtype=out.dtype),
                         np.ascontiguousarray(x.data, dtype=out.dtype), out)

    def vjp(g):
        gw = np.matmul(g, np.swapaxes(x.data, -1, -2)).sum(axis=0)
        gx = np.matmul(np.swapaxes(w.data, -1, -2), g)
        return gw.astype(w.dtype), gx.astype(x.dtype)

    return record("channel_project", Tensor(out), (w, x), vjp)


def _project(x_seq: Tensor, sp: ScanParams) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """x_seq (n, K, c, L) -> (delta, A, B, C, D) in scan_core layout."""
    B = channel_project(sp.w_b, x_seq)
    C = channel_project(sp.w_c, x_seq)
    low = channel_project(sp.w_dt, x_seq)
    dt = ops.add(channel_project(sp.w_dt_up, low), ops.reshape(sp.dt_bias, sp.dt_bias.shape + (1,)))
    delta = ops.softplus(dt)
    A = ops.mul(ops.exp(sp.a_log), -1.0)
    return delta, A, B, C, sp.d_skip


def selective_scan(x_seq: Tensor, params: ScanParams) -> Tensor:
    """Single-direction selective scan of a (c, T) sequence."""
    if x_seq.ndim != 2:
        raise DimensionError(f"selective_scan expects (c, T), got {x_seq.shape}")
    c, T = x_seq.shape
    sp = ScanParams(*(ops.reshape(t, (1,) + t.shape) for t in params.tensors()))
    seq = ops.reshape(x_seq, (1, 1, c, T))
    delta, A, B, C, D = _project(seq, sp)
    y = scan_core(seq, delta, A, B, C, D)
    return ops.reshape(y, (c, T))


def _to_sequences(x: Tensor) -> Tensor:
    """(n, c, h, w) -> (n, 4, c, h*w) in DIRECTIONS order."""
    n, c, h, w = x.shape
    row = ops.reshape(x, (n, 1, c, h * w))
    col = ops.reshape(ops.transpose(x, (0, 1, 3, 2)), (n, 1, c, h * w))
    return ops.concat([row, ops.flip(row, 3), col, ops.flip(col, 3)], axis=1)


def _from_sequences(y: Tensor, h: int, w: int) -> Tensor:
    n, K, c, L = y.shape
    rf, rb, cf, cb = ops.split(y, 4, axis=1)
    rows = ops.add(rf, ops.flip(rb, 3))
    cols = ops.add(cf, ops.flip(cb, 3))
    rows = ops.reshape(rows, (n, c, h, w))
    cols = ops.transpose(ops.reshape(cols, (n, c, w, h)), (0, 1, 3, 2))
    return ops.add(rows, cols)


def ss2d(x_map: Tensor, params: ScanParams) -> Tensor:
    """Four-direction selective scan over a feature map, outputs summed.

    ``x_map`` is (n, c, h, w) or (c, h, w); ``params`` fields carry K=4.
    """
    squeeze = x_map.ndim == 3
    if squeeze:
        x_map = ops.reshape(x_map, (1,) + x_map.shape)
    n, c, h, w = x_map.shape
    if params.a_log.shape[0] != 4:
        raise ConfigurationError("ss2d needs one parameter set per direction (K=4)")
    seq = _to_sequences(x_map)
    delta, A, B, C, D = _project(seq, params)
    y = scan_core(seq, delta, A, B, C, D)
    out = _from_sequences(y, h, w)
    return ops.reshape(out, (c, h, w)) if squeeze else out


# ---------------------------------------------------------------------------
# VSS block


def init_vss(p: ParamView, rng: np.random.Generator, channels: int, d_state: int,
             expand: int, dt_rank_rule: int = 8) -> None:
    c = channels
    d = expand * c
    p.add("norm_in.gamma", np.ones(c))
    p.add("norm_in.beta", np.zeros(c))
    p.add("in_main.w", fan_in_uniform(rng, (d, c)))
    p.add("in_gate.w", fan_in_uniform(rng, (d, c)))
    p.add("dw.w", fan_in_uniform(rng, (d, 1, 3, 3)))
    p.add("dw.b", np.zeros(d))
    init_scan_params(p.sub("ss2d"), rng, d, d_state, dt_rank_for(d, dt_rank_rule))
    p.add("norm_out.gamma", np.ones(d))
    p.add("norm_out.beta", np.zeros(d))
    p.add("out.w", fan_in_uniform(rng, (c, d)))


def vss_block(x: Tensor, p: ParamView) -> Tensor:
    """Residual VSS block; shape-preserving over (n, c, h, w)."""
    z = ops.normalize(x, "layer", p["norm_in.gamma"], p["norm_in.beta"])
    main = ops.pointwise_conv(z, p["in_main.w"])
    main = ops.depthwise_conv2d(main, p["dw.w"], p["dw.b"])
    main = ops.silu(main)
    main = ss2d(main, ScanParams.from_view(p.sub("ss2d")))
    main = ops.normalize(main, "layer", p["norm_out.gamma"], p["norm_out.beta"])
    gate = ops.silu(ops.pointwise_conv(z, p["in_gate.w"]))
    return ops.add(ops.pointwise_conv(ops.mul(main, gate), p["out.w"]), x)
