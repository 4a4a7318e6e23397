"""Slow brute-force oracles used to validate the fast kernels.

Nothing here shares code with the differentiable implementations: each oracle
walks the defining recurrence or sum one element at a time in float64.
"""

from __future__ import annotations

import numpy as np


def _softplus(z):
    return np.logaddexp(0.0, z)


def scan_recurrence(x: np.ndarray, a_log, d_skip, w_b, w_c, w_dt, w_dt_up, dt_bias) -> np.ndarray:
    """Per-step selective scan of ``x`` (c, T) with one parameter set."""
    x = np.asarray(x, dtype=np.float64)
    c, T = x.shape
    A = -np.exp(np.asarray(a_log, dtype=np.float64))
    h = np.zeros_like(A)
    y = np.zeros((c, T))
    for t in range(T):
        xt = x[:, t]
        b_t = w_b @ xt
        c_t = w_c @ xt
        delta = _softplus(w_dt_up @ (w_dt @ xt) + dt_bias)
        a_bar = np.exp(delta[:, None] * A)
        b_bar = delta[:, None] * b_t[None, :]
        h = a_bar * h + b_bar * xt[:, None]
        y[:, t] = h @ c_t + d_skip * xt
    return y


SCAN_FIELDS = ("a_log", "d_skip", "w_b", "w_c", "w_dt", "w_dt_up", "dt_bias")


def _traversals(h: int, w: int) -> list[list[tuple[int, int]]]:
    rows = [(i, j) for i in range(h) for j in range(w)]
    cols = [(i, j) for j in range(w) for i in range(h)]
    return [rows, rows[::-1], cols, cols[::-1]]


def ss2d_recurrence(x: np.ndarray, params: dict) -> np.ndarray:
    """Four traversals of ``x`` (c, h, w), each scanned with its own parameter set, summed."""
    x = np.asarray(x, dtype=np.float64)
    c, h, w = x.shape
    out = np.zeros_like(x)
    for k, path in enumerate(_traversals(h, w)):
        seq = np.stack([x[:, i, j] for i, j in path], axis=1)
        y = scan_recurrence(seq, *(np.asarray(params[f][k], dtype=np.float64) for f in SCAN_FIELDS))
        for t, (i, j) in enumerate(path):
            out[:, i, j] += y[:, t]
    return out


def conv2d_direct(x: np.ndarray, w: np.ndarray, b=None, stride: int = 1, padding: int = 0,
                  groups: int = 1) -> np.ndarray:
    """Cross-correlation evaluated one output pixel at a time."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    cog = co // groups
    out = np.zeros((n, co, ho, wo))
    for g in range(groups):
        wg = w[g * cog:(g + 1) * cog]
        xg = xp[:, g * cig:(g + 1) * cig]
        for i in range(ho):
            for j in range(wo):
                patch = xg[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[:, g * cog:(g + 1) * cog, i, j] = np.einsum("nchw,ochw->no", patch, wg)
    if b is not None:
        out += np.asarray(b)[None, :, None, None]
    return out
