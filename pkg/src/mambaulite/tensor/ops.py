"""Differentiable primitives over :class:`Tensor`.

Dense convolutions lower to one GEMM per group over an im2col buffer; depthwise
convolution and pooling loop over kernel taps, each tap being a strided view of
the zero-padded input. Reduction order per output element is fixed, so results
are deterministic run to run.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ConfigurationError, DegenerateInputError, DimensionError
from .core import Tensor, as_tensor, note_kink, record

# ---------------------------------------------------------------------------
# helpers


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ConfigurationError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of NumPy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op} expects a rank-4 (n, c, h, w) tensor, got shape {x.shape}")


def _promote(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _chan_mix(m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(o, c) x (n, c, h, w) -> (n, o, h, w)."""
    n, c, h, w = x.shape
    return np.matmul(m, x.reshape(n, c, h * w)).reshape(n, m.shape[0], h, w)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = Tensor(a.data + b.data)
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = Tensor(a.data - b.data)
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _promote(a, b)
    out = Tensor(a.data / b.data)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return record("div", out, (a, b), vjp)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    return record("exp", out, (x,), lambda g: (g * y,))


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_kink(mask)
    out = Tensor(np.where(mask, x.data, 0).astype(x.dtype))
    return record("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = Tensor(s)
    return record("sigmoid", out, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = Tensor(x.data * s)
    return record("silu", out, (x,), lambda g: (g * (s + x.data * s * (1 - s)),))


def softplus(x: Tensor) -> Tensor:
    out = Tensor((np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))).astype(x.dtype))
    return record("softplus", out, (x,), lambda g: (g * expit(x.data),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "silu": silu, "softplus": softplus}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = Tensor(x.data.reshape(shape))
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))
    out = Tensor(np.transpose(x.data, perm))
    return record("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def flip(x: Tensor, axis: int) -> Tensor:
    out = Tensor(np.flip(x.data, axis=axis))
    return record("flip", out, (x,), lambda g: (np.flip(g, axis=axis),))


def take(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along ``axis``."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx])

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return record("take", out, (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if not xs:
        raise DimensionError("concat needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(ref, t.shape)) if i != axis % len(ref)):
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))

    def vjp(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return record("concat", out, xs, vjp)


def split(x: Tensor, parts: int, axis: int = 1) -> list[Tensor]:
    size = x.shape[axis]
    if parts < 1 or size % parts:
        raise DimensionError(f"cannot split axis of size {size} into {parts} equal parts")
    step = size // parts
    return [take(x, axis, i * step, (i + 1) * step) for i in range(parts)]


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    _check4(x, "split_channels")
    return split(x, parts, axis=1)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    for t in xs:
        _check4(t, "concat_channels")
    return concat(xs, axis=1)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype))
    return record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def sum_axes(x: Tensor, axes, keepdims: bool = False) -> Tensor:
    axes = tuple(np.atleast_1d(axes).tolist())
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return record("sum_axes", out, (x,), vjp)


def mean(x: Tensor, axes, keepdims: bool = True) -> Tensor:
    axes = tuple(np.atleast_1d(axes).tolist())
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DegenerateInputError(f"mean over empty axes {axes} of shape {x.shape}")
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return record("mean", out, (x,), vjp)


def amax(x: Tensor, axis: int, keepdims: bool = True) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal element."""
    arg = np.argmax(x.data, axis=axis)
    note_kink(arg)
    arg_k = np.expand_dims(arg, axis)
    val = np.take_along_axis(x.data, arg_k, axis=axis)
    out = Tensor(val if keepdims else np.squeeze(val, axis))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(full, arg_k, g, axis=axis)
        return (full,)

    return record("amax", out, (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with NumPy broadcasting over leading axes."""
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record("matmul", out, (a, b), vjp)


# ---------------------------------------------------------------------------
# convolutions


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """Grouped 2D cross-correlation with zero padding."""
    _check4(x, "conv2d")
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be rank 4, got {w.shape}")
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups < 1 or c % groups or co % groups:
        raise DimensionError(f"channels in={c} out={co} not divisible by groups={groups}")
    if cig * groups != c:
        raise DimensionError(f"input has {c} channels but weight expects {cig * groups}")
    if min(sh, sw) < 1 or min(ph, pw) < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{wd + 2 * pw}")
    if b is not None and b.shape != (co,):
        raise DimensionError(f"bias shape {b.shape} does not match {co} output channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cog = co // groups
    P = ho * wo
    taps = kh * kw

    def tap(i, j, arr):
        return arr[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]

    # im2col: cols[n, ci, i, j, y, x] = xp[n, ci, i + sh*y, j + sw*x]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = tap(i, j, xp)
    cols = cols.reshape(n, groups, cig * taps, P)
    wmat = w.data.reshape(groups, cog, cig * taps)
    out = np.empty((n, co, P), dtype=x.dtype)
    for gi in range(groups):
        out[:, gi * cog:(gi + 1) * cog] = np.matmul(wmat[gi], cols[:, gi])
    out = out.reshape(n, co, ho, wo)
    if b is not None:
        out += b.data.reshape(1, co, 1, 1)
    result = Tensor(out)

    def vjp(g):
        gflat = g.reshape(n, groups, cog, P)
        gw = np.empty_like(wmat)
        gcols = np.empty((n, groups, cig * taps, P), dtype=x.dtype)
        for gi in range(groups):
            gw[gi] = np.tensordot(gflat[:, gi], cols[:, gi], axes=([0, 2], [0, 2]))
            gcols[:, gi] = np.matmul(wmat[gi].T, gflat[:, gi])
        gcols = gcols.reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                tap(i, j, gxp)[...] += gcols[:, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if b is not None else None
        return gx, gw.reshape(w.shape), gb

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv2d", result, inputs, vjp)


def same_padding(k: int) -> int:
    if k % 2 == 0:
        raise ConfigurationError(f"'same' padding needs an odd kernel, got {k}")
    return (k - 1) // 2


def depthwise_conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding="same") -> Tensor:
    """Per-channel convolution; ``w`` has shape (c, 1, kh, kw)."""
    _check4(x, "depthwise_conv2d")
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[0] != c or w.shape[1] != 1:
        raise DimensionError(f"depthwise weight {w.shape} incompatible with {c} channels")
    kh, kw = w.shape[2], w.shape[3]
    if padding == "same":
        ph, pw = same_padding(kh), same_padding(kw)
    else:
        ph, pw = _pair(padding)
    ho, wo = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    wt = w.data[:, 0]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + ho, j:j + wo] * wt[:, i, j].reshape(1, c, 1, 1)
    if b is not None:
        out += b.data.reshape(1, c, 1, 1)
    result = Tensor(out)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + ho, j:j + wo] += g * wt[:, i, j].reshape(1, c, 1, 1)
                gw[:, 0, i, j] = (g * xp[:, :, i:i + ho, j:j + wo]).sum(axis=(0, 2, 3), dtype=np.float64)
        gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if b is not None else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return record("depthwise_conv2d", result, inputs, vjp)


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution; ``w`` may be (c_out, c_in) or (c_out, c_in, 1, 1)."""
    _check4(x, "pointwise_conv")
    n, c, h, wd = x.shape
    w2 = w.data.reshape(w.shape[0], -1)
    if w2.shape[1] != c:
        raise DimensionError(f"pointwise weight {w.shape} expects {w2.shape[1]} channels, input has {c}")
    co = w2.shape[0]
    out = _chan_mix(w2, x.data)
    if b is not None:
        out = out + b.data.reshape(1, co, 1, 1)
    result = Tensor(out)

    def vjp(g):
        gflat = g.reshape(n, co, h * wd)
        xflat = x.data.reshape(n, c, h * wd)
        gx = np.matmul(w2.T, gflat).reshape(x.shape)
        gw = np.tensordot(gflat, xflat, axes=([0, 2], [0, 2])).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(g.dtype) if b is not None else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return record("pointwise_conv", result, inputs, vjp)


# ---------------------------------------------------------------------------
# pooling


def pool2d(x: Tensor, kind: str, kernel: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max or average pooling. Average pooling excludes padding from the divisor."""
    _check4(x, "pool2d")
    if kind not in ("max", "avg"):
        raise ConfigurationError(f"unknown pooling kind {kind!r}")
    k = int(kernel)
    s = k if stride is None else int(stride)
    p = int(padding)
    if k < 1 or s < 1 or p < 0:
        raise ConfigurationError("pooling needs kernel >= 1, stride >= 1, padding >= 0")
    n, c, h, wd = x.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"pool kernel {k} larger than padded input {h + 2 * p}x{wd + 2 * p}")
    pads = ((0, 0), (0, 0), (p, p), (p, p))

    def tap(i, j, arr):
        return arr[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]

    if kind == "max":
        xp = np.pad(x.data, pads, constant_values=-np.inf)
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        win = win.reshape(n, c, ho, wo, k * k)
        arg = np.argmax(win, axis=-1)
        note_kink(arg)
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        result = Tensor(np.ascontiguousarray(out))

        def vjp(g):
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for t in range(k * k):
                i, j = divmod(t, k)
                tap(i, j, gxp)[...] += np.where(arg == t, g, 0)
            return (gxp[:, :, p:p + h, p:p + wd],)

        return record("max_pool2d", result, (x,), vjp)

    xp = np.pad(x.data, pads)
    ones = np.pad(np.ones((1, 1, h, wd), dtype=np.float64), pads)
    total = np.zeros((n, c, ho, wo), dtype=np.float64)
    count = np.zeros((1, 1, ho, wo), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            total += tap(i, j, xp)
            count += tap(i, j, ones)
    result = Tensor((total / count).astype(x.dtype))
    inv = (1.0 / count).astype(x.dtype)

    def vjp(g):
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        gs = g * inv
        for i in range(k):
            for j in range(k):
                tap(i, j, gxp)[...] += gs
        return (gxp[:, :, p:p + h, p:p + wd],)

    return record("avg_pool2d", result, (x,), vjp)


# ---------------------------------------------------------------------------
# resampling


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Rows map output positions to input taps (half-pixel centers, edge clamped)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for d in range(n_out):
        src = (d + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[d, i0] += 1.0 - lam
        m[d, i1] += lam
    return m.astype(dtype)


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    _check4(x, "resize_bilinear")
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"target size must be positive, got {out_h}x{out_w}")
    n, c, h, wd = x.shape
    if h < 1 or wd < 1:
        raise DegenerateInputError("cannot resize an empty feature map")
    if (h, wd) == (out_h, out_w):
        return x
    mh = bilinear_matrix(h, out_h, x.dtype)
    mw = bilinear_matrix(wd, out_w, x.dtype)
    out = Tensor(np.matmul(np.matmul(mh, x.data), mw.T))
    return record("resize_bilinear", out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


# ---------------------------------------------------------------------------
# normalization


class RunningStats:
    """Mutable running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int, dtype=np.float32, momentum: float = 0.1):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum


def _normalize_axes(x: Tensor, axes: tuple, gamma: Tensor | None, beta: Tensor | None,
                    eps: float, channel_axis: int = 1) -> tuple[Tensor, np.ndarray, np.ndarray]:
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DegenerateInputError(f"normalization over empty axes {axes} of shape {x.shape}")
    mu = x.data.mean(axis=axes, keepdims=True, dtype=np.float64)
    var = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    bshape = [1] * x.ndim
    bshape[channel_axis] = x.shape[channel_axis]
    g_arr = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat if g_arr is None else xhat * g_arr
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    other = tuple(i for i in range(x.ndim) if i != channel_axis)
    inv_c = inv.astype(x.dtype)

    def vjp(g):
        gy = g * g_arr if g_arr is not None else g
        m1 = gy.mean(axis=axes, keepdims=True, dtype=np.float64)
        m2 = (gy * xhat).mean(axis=axes, keepdims=True, dtype=np.float64)
        gx = (inv_c * (gy - m1 - xhat * m2)).astype(x.dtype)
        gg = (g * xhat).sum(axis=other, dtype=np.float64).astype(x.dtype) if gamma is not None else None
        gb = g.sum(axis=other, dtype=np.float64).astype(x.dtype) if beta is not None else None
        return gx, gg, gb

    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def vjp_filtered(g):
        gx, gg, gb = vjp(g)
        res = [gx]
        if gamma is not None:
            res.append(gg)
        if beta is not None:
            res.append(gb)
        return tuple(res)

    result = Tensor(np.asarray(out, dtype=x.dtype))
    return record("normalize", result, inputs, vjp_filtered), mu, var


def normalize(x: Tensor, kind: str, gamma: Tensor | None = None, beta: Tensor | None = None,
              running_stats: RunningStats | None = None, mode: str = "train", eps: float = 1e-5) -> Tensor:
    """Batch, instance or layer (channel-axis) normalization with per-channel affine."""
    _check4(x, "normalize")
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    n, c, h, w = x.shape
    for p in (gamma, beta):
        if p is not None and p.shape != (c,):
            raise DimensionError(f"affine parameter shape {p.shape} does not match {c} channels")
    if h * w == 0:
        raise DegenerateInputError(f"normalize: zero spatial size in shape {x.shape}")
    if kind == "instance":
        return _normalize_axes(x, (2, 3), gamma, beta, eps)[0]
    if kind == "layer":
        return _normalize_axes(x, (1,), gamma, beta, eps)[0]
    if kind != "batch":
        raise ConfigurationError(f"unknown normalization kind {kind!r}")
    if mode == "train":
        out, mu, var = _normalize_axes(x, (0, 2, 3), gamma, beta, eps)
        if running_stats is not None:
            m = running_stats.momentum
            cnt = n * h * w
            unbiased = var.reshape(c) * (cnt / max(cnt - 1, 1))
            rs = running_stats
            rs.mean[...] = ((1 - m) * rs.mean + m * mu.reshape(c)).astype(rs.mean.dtype)
            rs.var[...] = ((1 - m) * rs.var + m * unbiased).astype(rs.var.dtype)
        return out
    if mode != "eval":
        raise ConfigurationError(f"unknown normalization mode {mode!r}")
    if running_stats is None:
        raise ConfigurationError("eval-mode batch norm requires running statistics")
    scale = (1.0 / np.sqrt(running_stats.var.astype(np.float64) + eps)).astype(x.dtype).reshape(1, c, 1, 1)
    shift = running_stats.mean.astype(x.dtype).reshape(1, c, 1, 1)
    xhat = Tensor((x.data - shift) * scale)
    xhat = record("bn_eval", xhat, (x,), lambda g: (g * scale,))
    out = xhat
    if gamma is not None:
        out = mul(out, reshape(gamma, (1, c, 1, 1)))
    if beta is not None:
        out = add(out, reshape(beta, (1, c, 1, 1)))
    return out
