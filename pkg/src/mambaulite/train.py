"""Adam optimizer, plateau learning-rate schedule, evaluation and the training loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Sample, stack
from .errors import ContractError, DivergenceError
from .losses import LossConfig, MaskPair, binarize, composite_loss, per_image_metrics
from .model import MambaULite
from .tensor import Tape, Tensor, backward


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        """Apply one update; ``grads`` maps each parameter to its gradient."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = grads[p]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * update).astype(p.dtype, copy=False)

    def state(self) -> tuple:
        return self.t, [m.copy() for m in self.m], [v.copy() for v in self.v]

    def restore(self, state) -> None:
        self.t, m, v = state
        self.m = [a.copy() for a in m]
        self.v = [a.copy() for a in v]


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored score has not
    improved for ``patience`` consecutive epochs; the counter restarts after each cut."""

    def __init__(self, lr: float, patience: int = 10, factor: float = 0.5):
        if patience < 1 or not 0.0 < factor < 1.0:
            raise ContractError("patience must be >= 1 and factor in (0, 1)")
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = -np.inf
        self.bad = 0
        self.epoch = 0
        self.reductions: list[int] = []

    def step(self, score: float) -> float:
        self.epoch += 1
        if score > self.best:
            self.best = score
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.bad = 0
                self.reductions.append(self.epoch)
        return self.lr


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-3
    patience: int = 10
    factor: float = 0.5
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_dsc: float
    val_iou: float
    lr: float

    FIELDS = ("epoch", "loss", "val_dsc", "val_iou", "lr")

    def csv_row(self) -> str:
        return f"{self.epoch},{self.loss:.8f},{self.val_dsc:.8f},{self.val_iou:.8f},{self.lr:.8g}"


def csv_header() -> str:
    return ",".join(EpochRecord.FIELDS)


def best_loss_envelope(log: Sequence[EpochRecord]) -> np.ndarray:
    return np.minimum.accumulate(np.array([r.loss for r in log], dtype=np.float64))


def predict(model: MambaULite, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Foreground probabilities (n, 1, h, w) in evaluation mode."""
    out = [model.predict_proba(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 1) + images.shape[2:])


def evaluate(model: MambaULite, samples: Sequence[Sample], batch_size: int = 8
             ) -> tuple[np.ndarray, np.ndarray]:
    """Per-image DSC and IoU of thresholded predictions."""
    if not samples:
        raise ContractError("evaluation set is empty")
    images, masks = stack(samples)
    return per_image_metrics(binarize(predict(model, images, batch_size)), masks)


def train_step(model: MambaULite, opt: Adam, images: np.ndarray, masks: np.ndarray,
               loss_cfg: LossConfig) -> float:
    with Tape() as tape:
        logits = model.forward(images, training=True)
        loss = composite_loss(MaskPair.from_logits(logits, masks), loss_cfg)
    value = float(loss.data)
    if not np.isfinite(value):
        return value
    opt.step(backward(tape, loss))
    return value


def _snapshot(model: MambaULite) -> tuple[list[np.ndarray], list[tuple[np.ndarray, np.ndarray]]]:
    params = [t.data.copy() for t in model.params.tensors.values()]
    stats = [(rs.mean.copy(), rs.var.copy()) for rs in model.params.stats.values()]
    return params, stats


def _restore(model: MambaULite, snap) -> None:
    params, stats = snap
    for t, a in zip(model.params.tensors.values(), params):
        t.data = a.copy()
    for rs, (m, v) in zip(model.params.stats.values(), stats):
        rs.mean[...] = m
        rs.var[...] = v


def fit(model: MambaULite, train: Sequence[Sample], val: Sequence[Sample], schedule: TrainSchedule,
        on_epoch: Callable[[MambaULite, EpochRecord], None] | None = None) -> list[EpochRecord]:
    """Train in place; returns one record per epoch.

    On a non-finite loss the parameters are rolled back to the end of the last
    completed epoch and :class:`DivergenceError` is raised with ``.log`` attached.
    """
    if not train:
        raise ContractError("training set is empty")
    images, masks = stack(train)
    images = images.astype(model.dtype)
    opt = Adam(model.params.trainable(), lr=schedule.lr)
    sched = PlateauScheduler(schedule.lr, schedule.patience, schedule.factor)
    rng = np.random.default_rng(schedule.seed)
    log: list[EpochRecord] = []
    last_good = _snapshot(model)
    bs = schedule.batch_size
    for epoch in range(1, schedule.epochs + 1):
        lr = sched.lr
        opt.lr = lr
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            value = train_step(model, opt, images[idx], masks[idx], schedule.loss)
            if not np.isfinite(value):
                _restore(model, last_good)
                err = DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                err.log = log
                raise err
            total += value * len(idx)
        if val:
            dsc, iou = evaluate(model, val, bs)
            vd, vi = float(dsc.mean()), float(iou.mean())
        else:
            vd = vi = float("nan")
        rec = EpochRecord(epoch, total / len(order), vd, vi, lr)
        log.append(rec)
        sched.step(vd)
        last_good = _snapshot(model)
        if on_epoch is not None:
            on_epoch(model, rec)
    return log
