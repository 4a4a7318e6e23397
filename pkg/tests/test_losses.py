"""Dice, Tversky and composite losses plus the binary DSC / IoU metrics."""

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambaulite.errors import ContractError
from mambaulite.losses import (LossConfig, MaskPair, binarize, composite_loss, dice_loss, dsc_metric, iou_metric,
                               per_image_metrics, tversky_loss)
from mambaulite.tensor import Tensor, grad_check

EPS = 1e-6
F2 = LossConfig(tversky_numerator_factor=2)
HALF = LossConfig(gamma1=0.5, gamma2=0.5)


def val(loss, p, g, cfg=LossConfig()):
    return float(loss(MaskPair(np.asarray(p, dtype=np.float64), np.asarray(g)), cfg).data)


def dice_oracle(p, g):
    return 1 - (2 * np.sum(p * g) + EPS) / (np.sum(g) + np.sum(p) + EPS)


def tversky_oracle(p, g, g1=0.7, g2=0.3, f=1):
    tp = np.sum(p * g)
    return 1 - (f * tp + EPS) / (tp + g1 * np.sum(g * (1 - p)) + g2 * np.sum((1 - g) * p) + EPS)


@st.composite
def pairs(draw, max_n=24):
    n = draw(st.integers(1, max_n))
    seed = draw(st.integers(0, 2**31))
    rng = np.random.default_rng(seed)
    p = rng.uniform(1e-3, 1 - 1e-3, n)
    g = (rng.uniform(size=n) < draw(st.floats(0, 1))).astype(np.float64)
    return p, g


class TestWorkedExamples:
    P, G = [1, 0, 1, 0], [1, 1, 0, 0]

    def test_perfect(self):
        for loss in (dice_loss, tversky_loss, composite_loss):
            assert abs(val(loss, self.G, self.G)) <= 1e-6

    def test_disjoint_dice(self):
        assert val(dice_loss, [0, 1], [1, 0]) == pytest.approx(1.0, abs=1e-6)

    def test_half_overlap(self):
        assert val(dice_loss, self.P, self.G) == pytest.approx(0.5, abs=1e-6)
        assert val(tversky_loss, self.P, self.G) == pytest.approx(0.5, abs=1e-6)
        assert val(composite_loss, self.P, self.G) == pytest.approx(0.5, abs=1e-6)

    def test_factor_two_variant(self):
        assert val(tversky_loss, self.P, self.G, F2) == pytest.approx(0.0, abs=1e-6)
        assert val(tversky_loss, self.G, self.G, F2) == pytest.approx(-1.0, abs=1e-6)

    def test_uniform_half_composite(self):
        p, g = np.array([0.5, 0.5]), np.array([1.0, 0.0])
        want = 0.5 * dice_oracle(p, g) + 0.5 * tversky_oracle(p, g)
        assert abs(val(composite_loss, p, g) - want) <= 1e-9

    def test_batch_mean(self):
        p = np.array([[1, 0, 1, 0], [1, 1, 0, 0]], dtype=float)
        g = np.array([[1, 1, 0, 0], [1, 1, 0, 0]])
        assert val(dice_loss, p, g) == pytest.approx(0.25, abs=1e-6)

    def test_from_logits(self):
        logits = Tensor(np.zeros((2, 1, 2, 2)))
        pair = MaskPair.from_logits(logits, np.ones((2, 1, 2, 2)))
        assert pair.p.shape == (2, 4)
        assert np.all(pair.p.data == 0.5)


class TestContracts:
    def test_length_mismatch(self):
        with pytest.raises(ContractError):
            MaskPair(np.full(3, 0.5), np.zeros(4))

    def test_non_binary_target(self):
        with pytest.raises(ContractError):
            MaskPair(np.full(2, 0.5), np.array([0.0, 0.5]))

    @pytest.mark.parametrize("bad", [dict(gamma1=-0.1), dict(mix_dice=0.6), dict(tversky_numerator_factor=3)])
    def test_bad_config(self, bad):
        with pytest.raises(ContractError):
            LossConfig(**bad)


class TestLossProperties:
    @settings(max_examples=200, deadline=None)
    @given(pair=pairs())
    def test_oracles(self, pair):
        p, g = pair
        assert abs(val(dice_loss, p, g) - dice_oracle(p, g)) <= 1e-12
        assert abs(val(tversky_loss, p, g) - tversky_oracle(p, g)) <= 1e-12
        assert abs(val(tversky_loss, p, g, F2) - tversky_oracle(p, g, f=2)) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(pair=pairs())
    def test_unit_range(self, pair):
        p, g = pair
        for loss in (dice_loss, tversky_loss, composite_loss):
            v = val(loss, p, g)
            assert -1e-6 <= v <= 1 + 1e-6

    @settings(max_examples=200, deadline=None)
    @given(pair=pairs())
    def test_half_tversky_is_dice(self, pair):
        p, g = pair
        bare = LossConfig(gamma1=0.5, gamma2=0.5, smooth=0.0)
        assert abs(val(tversky_loss, p, g, bare) - val(dice_loss, p, g, bare)) <= 1e-9
        # with smoothing the two ratios differ by eps (S - 2 tp) / ((S + eps)(S + 2 eps)) <= eps / S
        total = p.sum() + g.sum()
        assert abs(val(tversky_loss, p, g, HALF) - val(dice_loss, p, g)) <= EPS / total + 1e-12

    @settings(max_examples=200, deadline=None)
    @given(pair=pairs(), g1=st.floats(0, 2), g2=st.floats(0, 2))
    def test_role_swap(self, pair, g1, g2):
        p, g = pair
        hard = (p > 0.5).astype(np.float64)     # swapped roles need a binary second argument
        a = val(tversky_loss, hard, g, LossConfig(gamma1=g1, gamma2=g2))
        b = val(tversky_loss, g, hard, LossConfig(gamma1=g2, gamma2=g1))
        assert abs(a - b) <= 1e-9

    @settings(max_examples=100, deadline=None)
    @given(pair=pairs(), seed=st.integers(0, 2**31))
    def test_permutation_invariant(self, pair, seed):
        p, g = pair
        perm = np.random.default_rng(seed).permutation(len(p))
        for loss in (dice_loss, tversky_loss, composite_loss):
            assert abs(val(loss, p, g) - val(loss, p[perm], g[perm])) <= 1e-9

    @pytest.mark.parametrize("loss", [dice_loss, tversky_loss, composite_loss], ids=lambda f: f.__name__)
    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, loss, seed):
        rng = np.random.default_rng(seed)
        p = Tensor(rng.uniform(0.05, 0.95, (2, 30)), requires_grad=True)
        g = (rng.uniform(size=(2, 30)) < 0.4).astype(np.float64)
        res = grad_check(lambda: loss(MaskPair(p, g)), [p], n_coords=60)
        assert res.checked == 60
        assert res.max_rel_error <= 1e-6


class TestMetrics:
    def test_identical(self):
        m = np.array([[0, 1], [1, 1]])
        assert dsc_metric(m, m) == iou_metric(m, m) == 1.0

    def test_disjoint(self):
        assert dsc_metric([1, 0, 0], [0, 1, 1]) == iou_metric([1, 0, 0], [0, 1, 1]) == 0.0

    def test_counting_example(self):
        pred, g = [1, 1, 0], [0, 1, 1]
        assert dsc_metric(pred, g) == 0.5
        assert iou_metric(pred, g) == pytest.approx(1 / 3, abs=1e-15)

    def test_both_empty(self):
        assert dsc_metric(np.zeros(5), np.zeros(5)) == iou_metric(np.zeros(5), np.zeros(5)) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            dsc_metric(np.zeros(4), np.zeros((2, 2)))
        with pytest.raises(ContractError):
            per_image_metrics(np.zeros((2, 4)), np.zeros((3, 4)))

    def test_binarize_threshold(self):
        assert binarize([0.2, 0.5, 0.51]).tolist() == [0, 0, 1]

    @settings(max_examples=300, deadline=None)
    @given(n=st.integers(1, 40), seed=st.integers(0, 2**31))
    def test_counts_and_identity(self, n, seed):
        rng = np.random.default_rng(seed)
        pred, g = rng.integers(0, 2, n), rng.integers(0, 2, n)
        inter = sum(1 for a, b in zip(pred, g) if a and b)
        union = sum(1 for a, b in zip(pred, g) if a or b)
        size = int(pred.sum() + g.sum())
        dsc, iou = dsc_metric(pred, g), iou_metric(pred, g)
        exact_dsc = Fraction(2 * inter, size) if size else Fraction(1)
        exact_iou = Fraction(inter, union) if union else Fraction(1)
        assert exact_iou == exact_dsc / (2 - exact_dsc)
        assert abs(dsc - float(exact_dsc)) <= 1e-15
        assert abs(iou - float(exact_iou)) <= 1e-15
        assert abs(iou - dsc / (2 - dsc)) <= 1e-9

    def test_per_image(self, rng):
        preds, masks = rng.integers(0, 2, (5, 4, 4)), rng.integers(0, 2, (5, 4, 4))
        dsc, iou = per_image_metrics(preds, masks)
        assert dsc.tolist() == [dsc_metric(p, m) for p, m in zip(preds, masks)]
        assert iou.tolist() == [iou_metric(p, m) for p, m in zip(preds, masks)]
