"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError
from .core import KinkMonitor, Tape, Tensor, backward

ROUNDOFF_ULPS = 8
_U = float(np.finfo(np.float64).eps)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    worst: tuple | None = None
    errors: list = field(default_factory=list, repr=False)

    def __float__(self) -> float:
        return self.max_rel_error


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise ContractError(f"grad_check objective must be scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               n_coords: int = 64, seed: int = 0, rng: np.random.Generator | None = None) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn()`` against central differences.

    ``n_coords`` coordinates are sampled uniformly without replacement from the
    concatenation of all ``params`` (every coordinate if there are fewer).
    Coordinates whose +/- eps evaluations change the activation pattern of a
    ReLU or max selection are skipped: the function has a kink there.

    The error at a coordinate is ``max(0, |a - n| - r) / max(|a|, |n|, 1e-8)``
    where ``n`` is the central difference at ``eps`` and ``r`` is the larger of
    its floating-point cancellation bound ``ROUNDOFF_ULPS * u * (|f+| + |f-|) / (2 eps)``
    and its disagreement with the central difference at ``2 eps``. Without
    ``r``, gradients far below ``u * |f| / eps`` report large relative errors
    even when the analytic value is exact.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ContractError(f"grad_check needs 64-bit parameters, {p.name or p} is {p.dtype}")
    with Tape() as tape:
        out = fn()
    _scalar(out)
    grads = backward(tape, out)
    analytic = [grads[p].reshape(-1) for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = rng if rng is not None else np.random.default_rng(seed)
    picks = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, n_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def evaluate():
        with KinkMonitor() as mon:
            val = _scalar(fn())
        return val, mon.fingerprint()

    _, base_fp = evaluate()
    worst, worst_at, checked, skipped = 0.0, None, 0, 0
    errors = []
    for flat in picks:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[pi])
        view = params[pi].data.reshape(-1)
        orig = view[local]
        view[local] = orig + eps
        f_plus, fp_plus = evaluate()
        view[local] = orig - eps
        f_minus, fp_minus = evaluate()
        view[local] = orig + 2 * eps
        f_plus2, fp_plus2 = evaluate()
        view[local] = orig - 2 * eps
        f_minus2, fp_minus2 = evaluate()
        view[local] = orig
        if any(fp != base_fp for fp in (fp_plus, fp_minus, fp_plus2, fp_minus2)):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * eps)
        coarse = (f_plus2 - f_minus2) / (4 * eps)
        a = float(analytic[pi][local])
        r = max(ROUNDOFF_ULPS * _U * (abs(f_plus) + abs(f_minus)) / (2 * eps), abs(numeric - coarse))
        err = max(0.0, abs(a - numeric) - r) / max(abs(a), abs(numeric), 1e-8)
        errors.append(err)
        checked += 1
        if err > worst:
            worst, worst_at = err, (params[pi].name, local, a, numeric)
    return GradCheckResult(worst, checked, skipped, worst_at, errors)
