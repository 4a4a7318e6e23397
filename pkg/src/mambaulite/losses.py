"""Soft Dice / Tversky training losses and binary DSC / IoU metrics.

Losses take a :class:`MaskPair` whose last axis is the flattened pixel index.
Any leading axes are batch axes: the loss is computed per item and averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import Tensor
from .tensor import ops


@dataclass(frozen=True)
class LossConfig:
    gamma1: float = 0.7     # weight on false negatives
    gamma2: float = 0.3     # weight on false positives
    mix_dice: float = 0.5
    mix_tversky: float = 0.5
    smooth: float = 1e-6
    tversky_numerator_factor: int = 1

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ContractError("gamma1 and gamma2 must be non-negative")
        if abs(self.mix_dice + self.mix_tversky - 1.0) > 1e-12:
            raise ContractError("mix weights must sum to 1")
        if self.tversky_numerator_factor not in (1, 2):
            raise ContractError("tversky_numerator_factor must be 1 or 2")


@dataclass
class MaskPair:
    """Predicted probabilities ``p`` and binary ground truth ``g`` of equal shape."""

    p: Tensor
    g: np.ndarray

    def __post_init__(self):
        if not isinstance(self.p, Tensor):
            self.p = Tensor(np.asarray(self.p, dtype=np.float64))
        g = np.asarray(self.g)
        if g.shape != self.p.shape:
            raise ContractError(f"prediction shape {self.p.shape} != target shape {g.shape}")
        if self.p.ndim == 0:
            raise ContractError("mask pair needs at least one axis")
        if not np.isin(g, (0, 1)).all():
            raise ContractError("ground truth must be binary")
        self.g = g.astype(self.p.dtype)

    @classmethod
    def from_logits(cls, logits: Tensor, masks: np.ndarray) -> "MaskPair":
        """Flatten (n, 1, h, w) logits through a sigmoid into (n, h*w) pairs."""
        n = logits.shape[0]
        p = ops.reshape(ops.sigmoid(logits), (n, -1))
        return cls(p, np.asarray(masks).reshape(n, -1))


def _sums(pair: MaskPair) -> tuple[Tensor, Tensor, Tensor]:
    last = (pair.p.ndim - 1,)
    tp = ops.sum_axes(ops.mul(pair.p, pair.g), last)
    sp = ops.sum_axes(pair.p, last)
    sg = Tensor(pair.g.sum(axis=-1))
    return tp, sp, sg


def _batch_mean(x: Tensor) -> Tensor:
    if x.ndim == 0:
        return x
    return ops.reshape(ops.mean(x, tuple(range(x.ndim)), keepdims=False), ())


def dice_loss(pair: MaskPair, cfg: LossConfig = LossConfig()) -> Tensor:
    tp, sp, sg = _sums(pair)
    eps = cfg.smooth
    ratio = ops.div(ops.add(ops.mul(tp, 2.0), eps), ops.add(ops.add(sp, sg), eps))
    return _batch_mean(ops.sub(1.0, ratio))


def tversky_loss(pair: MaskPair, cfg: LossConfig = LossConfig()) -> Tensor:
    tp, sp, sg = _sums(pair)
    eps = cfg.smooth
    fn = ops.sub(sg, tp)        # sum g(1-p)
    fp = ops.sub(sp, tp)        # sum (1-g)p
    den = ops.add(ops.add(ops.add(tp, ops.mul(fn, cfg.gamma1)), ops.mul(fp, cfg.gamma2)), eps)
    num = ops.add(ops.mul(tp, float(cfg.tversky_numerator_factor)), eps)
    return _batch_mean(ops.sub(1.0, ops.div(num, den)))


def composite_loss(pair: MaskPair, cfg: LossConfig = LossConfig()) -> Tensor:
    return ops.add(ops.mul(dice_loss(pair, cfg), cfg.mix_dice),
                   ops.mul(tversky_loss(pair, cfg), cfg.mix_tversky))


# ---------------------------------------------------------------------------
# metrics


def _binary_counts(pred, g) -> tuple[int, int, int]:
    pred = np.asarray(pred)
    g = np.asarray(g)
    if pred.shape != g.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {g.shape}")
    pb = pred.astype(bool)
    gb = g.astype(bool)
    return int(np.count_nonzero(pb & gb)), int(np.count_nonzero(pb)), int(np.count_nonzero(gb))


def dsc_metric(pred, g) -> float:
    """2|P∩G| / (|P| + |G|) for one binary mask; 1.0 when both are empty."""
    inter, np_, ng = _binary_counts(pred, g)
    if np_ + ng == 0:
        return 1.0
    return 2.0 * inter / (np_ + ng)


def iou_metric(pred, g) -> float:
    """|P∩G| / |P∪G| for one binary mask; 1.0 when both are empty."""
    inter, np_, ng = _binary_counts(pred, g)
    union = np_ + ng - inter
    if union == 0:
        return 1.0
    return inter / union


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) > threshold).astype(np.uint8)


def per_image_metrics(preds, masks) -> tuple[np.ndarray, np.ndarray]:
    """DSC and IoU for each item along axis 0."""
    preds = np.asarray(preds)
    masks = np.asarray(masks)
    if preds.shape != masks.shape:
        raise ContractError(f"prediction shape {preds.shape} != target shape {masks.shape}")
    dsc = np.array([dsc_metric(p, g) for p, g in zip(preds, masks)])
    iou = np.array([iou_metric(p, g) for p, g in zip(preds, masks)])
    return dsc, iou
