"""Optimizer, plateau schedule, evaluation and the training loop."""

import numpy as np
import pytest

from mambaulite import train
from mambaulite.config import ModelConfig
from mambaulite.data import stack, synth_dataset
from mambaulite.errors import ContractError, DivergenceError
from mambaulite.losses import LossConfig, MaskPair, composite_loss
from mambaulite.model import build
from mambaulite.tensor import Tensor, ops
from mambaulite.train import (Adam, EpochRecord, PlateauScheduler, TrainSchedule, best_loss_envelope, csv_header,
                              evaluate, fit, predict, train_step)

TINY = ModelConfig(init_channels=8, d_state=4, expand=1, input_size=32, precision="float64")


@pytest.fixture(scope="module")
def samples():
    return synth_dataset(6, 32, seed=3)


def weights(model):
    return [t.data.copy() for t in model.params.tensors.values()]


class TestAdam:
    def test_zero_lr_is_noop(self, rng):
        w = Tensor(rng.standard_normal(5), requires_grad=True)
        before = w.data.copy()
        opt = Adam([w], lr=0.0)
        for _ in range(3):
            opt.step({w: rng.standard_normal(5)})
        assert np.array_equal(w.data, before)

    def test_first_step_is_signed_lr(self):
        w = Tensor(np.zeros(3), requires_grad=True)
        Adam([w], lr=0.1).step({w: np.array([2.0, -3.0, 0.5])})
        assert np.allclose(w.data, [-0.1, 0.1, -0.1], atol=1e-8)

    def test_quadratic_converges(self):
        w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        opt = Adam([w], lr=0.1)
        for _ in range(500):
            opt.step({w: 2 * w.data})
        assert np.all(np.abs(w.data) < 1e-2)

    def test_state_restore(self, rng):
        w = Tensor(np.zeros(2), requires_grad=True)
        opt = Adam([w])
        opt.step({w: np.ones(2)})
        saved = opt.state()
        opt.step({w: np.ones(2)})
        opt.restore(saved)
        assert opt.t == 1


class TestPlateau:
    def test_constant_score_halves_at_eleven(self):
        sched = PlateauScheduler(1e-3, patience=10)
        lrs = [sched.step(0.7) for _ in range(11)]
        assert lrs[:10] == [1e-3] * 10
        assert lrs[10] == 5e-4
        assert sched.reductions == [11]

    def test_counter_restarts(self):
        sched = PlateauScheduler(1.0, patience=3)
        for _ in range(10):
            sched.step(0.0)
        assert sched.reductions == [4, 7, 10]

    def test_improvement_resets(self):
        sched = PlateauScheduler(1.0, patience=3)
        for s in [0.1, 0.1, 0.1, 0.2, 0.2, 0.2]:
            sched.step(s)
        assert sched.reductions == [] and sched.lr == 1.0

    def test_bad_args(self):
        with pytest.raises(ContractError):
            PlateauScheduler(1.0, patience=0)
        with pytest.raises(ContractError):
            PlateauScheduler(1.0, factor=1.0)


class TestStep:
    @pytest.mark.parametrize("lr", [1e-3, 1e-4])
    def test_small_step_decreases_loss(self, samples, lr):
        model = build(TINY, seed=0)
        images, masks = stack(samples[:4])
        images = images.astype(np.float64)

        def loss_now():
            logits = model.forward(images, training=True)
            return float(composite_loss(MaskPair.from_logits(logits, masks)).data)

        before = loss_now()
        value = train_step(model, Adam(model.params.trainable(), lr=lr), images, masks, LossConfig())
        assert value == pytest.approx(before, abs=1e-12)
        assert loss_now() < before

    def test_predict_probabilities(self, samples):
        model = build(TINY, seed=0)
        images, _ = stack(samples[:3])
        p = predict(model, images, batch_size=2)
        assert p.shape == (3, 1, 32, 32)
        assert np.all((p > 0) & (p < 1))

    def test_evaluate_empty(self):
        with pytest.raises(ContractError):
            evaluate(build(TINY, seed=0), [])


class TestFit:
    def test_one_epoch(self, samples):
        model = build(TINY, seed=0)
        seen = []
        log = fit(model, samples[:4], samples[4:], TrainSchedule(epochs=1, batch_size=2),
                  on_epoch=lambda m, r: seen.append(r))
        assert len(log) == 1 and seen == log
        rec = log[0]
        assert rec.epoch == 1 and np.isfinite(rec.loss)
        assert 0.0 <= rec.val_dsc <= 1.0 and rec.lr == 1e-3

    def test_deterministic(self, samples):
        logs = []
        for _ in range(2):
            model = build(TINY, seed=1)
            logs.append([r.csv_row() for r in fit(model, samples[:4], samples[4:],
                                                  TrainSchedule(epochs=2, batch_size=2, seed=5))])
        assert logs[0] == logs[1]

    def test_empty_train(self, samples):
        with pytest.raises(ContractError):
            fit(build(TINY, seed=0), [], samples, TrainSchedule(epochs=1))

    def test_divergence_restores_last_epoch(self, samples, monkeypatch):
        model = build(TINY, seed=0)
        after_first = []
        real = train.composite_loss
        calls = {"n": 0}

        def flaky(pair, cfg):
            calls["n"] += 1
            out = real(pair, cfg)
            return ops.mul(out, np.nan) if calls["n"] > 2 else out

        monkeypatch.setattr(train, "composite_loss", flaky)
        with pytest.raises(DivergenceError) as info:
            fit(model, samples[:4], [], TrainSchedule(epochs=3, batch_size=2),
                on_epoch=lambda m, r: after_first.append(weights(m)))
        assert len(info.value.log) == 1
        for a, b in zip(weights(model), after_first[0]):
            assert np.array_equal(a, b)

    def test_scheduler_drives_lr(self, samples, monkeypatch):
        monkeypatch.setattr(train, "evaluate", lambda m, s, bs=8: (np.full(2, 0.5), np.full(2, 1 / 3)))
        log = fit(build(TINY, seed=0), samples[:2], samples[4:], TrainSchedule(epochs=4, batch_size=2, patience=2))
        assert [r.lr for r in log] == [1e-3, 1e-3, 1e-3, 5e-4]


class TestLogFormat:
    def test_header_and_row(self):
        assert csv_header() == "epoch,loss,val_dsc,val_iou,lr"
        assert EpochRecord(3, 0.25, 0.5, 1 / 3, 5e-4).csv_row() == "3,0.25000000,0.50000000,0.33333333,0.0005"

    def test_envelope(self):
        log = [EpochRecord(i, v, 0, 0, 0) for i, v in enumerate([0.5, 0.6, 0.4, 0.45, 0.3])]
        assert best_loss_envelope(log).tolist() == [0.5, 0.5, 0.4, 0.4, 0.3]
