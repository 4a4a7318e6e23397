"""Selective scan, SS2D and the VSS block against brute-force recurrences."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambaulite import verify
from mambaulite.reference import SCAN_FIELDS, scan_recurrence, ss2d_recurrence
from mambaulite.ssm import (DIRECTIONS, ScanParams, direction_order, discretize, init_scan_params, init_vss,
                            inverse_softplus, selective_scan, ss2d, vss_block)
from mambaulite.tensor import Tensor


def scan_params(rng, c, n, r, k=None, wide=True):
    """Random parameter arrays; ``k`` adds a leading direction axis."""
    lead = () if k is None else (k,)
    dt = rng.uniform(0.1, 1.0, lead + (c,)) if wide else rng.uniform(1e-3, 1e-1, lead + (c,))
    return {
        "a_log": rng.uniform(-1, 1.5, lead + (c, n)),
        "d_skip": rng.standard_normal(lead + (c,)),
        "w_b": rng.standard_normal(lead + (n, c)) / np.sqrt(c),
        "w_c": rng.standard_normal(lead + (n, c)) / np.sqrt(c),
        "w_dt": rng.standard_normal(lead + (r, c)) / np.sqrt(c),
        "w_dt_up": rng.standard_normal(lead + (c, r)) / np.sqrt(r),
        "dt_bias": inverse_softplus(dt),
    }


def as_scan(p):
    return ScanParams(*(Tensor(np.asarray(p[f], dtype=np.float64)) for f in SCAN_FIELDS))


class TestDiscretize:
    def test_half_decay(self):
        a_bar, b_bar = discretize(np.array([[-1.0]]), np.array([[2.0]]), np.array([np.log(2)]))
        assert a_bar.item() == pytest.approx(0.5, abs=1e-15)
        assert b_bar.item() == pytest.approx(2 * np.log(2), abs=1e-15)

    def test_small_step_freezes_state(self):
        a_bar, b_bar = discretize(np.array([[-3.0]]), np.array([[5.0]]), np.array([1e-12]))
        assert a_bar.item() == pytest.approx(1.0, abs=1e-10)
        assert abs(b_bar.item()) < 1e-10

    def test_decay_in_unit_interval(self, rng):
        for _ in range(200):
            c, n = rng.integers(1, 6, size=2)
            A = -np.exp(rng.uniform(-5, 3, (c, n)))
            delta = np.log1p(np.exp(rng.normal(0, 2, c)))
            a_bar, _ = discretize(A, rng.standard_normal((c, n)), delta)
            assert np.all((a_bar > 0) & (a_bar < 1))


class TestSelectiveScan:
    def test_two_step_hand_example(self):
        p = {"a_log": [[0.0]], "d_skip": [0.0], "w_b": [[1.0]], "w_c": [[1.0]],
             "w_dt": [[0.0]], "w_dt_up": [[0.0]], "dt_bias": [inverse_softplus(np.log(2)).item()]}
        y = selective_scan(Tensor(np.array([[1.0, 1.0]])), as_scan(p)).data
        ln2 = np.log(2)
        assert y[0] == pytest.approx([ln2, 0.5 * ln2 + ln2], abs=1e-14)
        assert np.round(y[0], 4).tolist() == [0.6931, 1.0397]

    def test_dead_state_path(self, rng):
        p = scan_params(rng, 5, 4, 1)
        p["w_b"] = np.zeros_like(p["w_b"])
        p["w_c"] = np.zeros_like(p["w_c"])
        x = rng.standard_normal((5, 9))
        y = selective_scan(Tensor(x), as_scan(p)).data
        assert np.array_equal(y, p["d_skip"][:, None] * x)

    def test_empty_sequence(self, rng):
        y = selective_scan(Tensor(np.zeros((3, 0))), as_scan(scan_params(rng, 3, 2, 1)))
        assert y.shape == (3, 0)

    def test_causal(self, rng):
        p = as_scan(scan_params(rng, 4, 3, 1))
        x = rng.standard_normal((4, 8))
        full = selective_scan(Tensor(x), p).data
        for t in range(1, 8):
            part = selective_scan(Tensor(np.ascontiguousarray(x[:, :t])), p).data
            assert np.array_equal(part, full[:, :t])

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), c=st.integers(1, 4), n=st.integers(1, 4), t=st.integers(1, 8),
           wide=st.booleans())
    def test_matches_recurrence(self, seed, c, n, t, wide):
        rng = np.random.default_rng(seed)
        p = scan_params(rng, c, n, max(1, -(-c // 8)), wide=wide)
        x = rng.standard_normal((c, t))
        got = selective_scan(Tensor(x), as_scan(p)).data
        want = scan_recurrence(x, *(p[f] for f in SCAN_FIELDS))
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_float32_close_to_oracle(self, rng):
        p = scan_params(rng, 6, 4, 1)
        x = rng.standard_normal((6, 64))
        sp32 = ScanParams(*(Tensor(np.asarray(p[f], dtype=np.float32)) for f in SCAN_FIELDS))
        got = selective_scan(Tensor(x.astype(np.float32)), sp32).data
        want = scan_recurrence(x, *(p[f] for f in SCAN_FIELDS))
        assert got.dtype == np.float32
        assert np.max(np.abs(got - want)) <= 1e-4 * max(1.0, np.abs(want).max())


class TestDirections:
    def test_two_by_two_visits(self):
        assert direction_order("row-forward", 2, 2).tolist() == [0, 1, 2, 3]
        assert direction_order("col-forward", 2, 2).tolist() == [0, 2, 1, 3]
        assert direction_order("row-backward", 2, 2).tolist() == [3, 2, 1, 0]
        assert direction_order("col-backward", 2, 2).tolist() == [3, 1, 2, 0]

    @pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (4, 4), (3, 1)])
    def test_permutations_and_reversals(self, h, w):
        for d in DIRECTIONS:
            assert sorted(direction_order(d, h, w).tolist()) == list(range(h * w))
        assert np.array_equal(direction_order("row-backward", h, w), direction_order("row-forward", h, w)[::-1])
        assert np.array_equal(direction_order("col-backward", h, w), direction_order("col-forward", h, w)[::-1])


class TestSS2D:
    def test_single_pixel_is_four_scans(self, rng):
        one = scan_params(rng, 3, 2, 1)
        four = {f: np.stack([np.asarray(one[f])] * 4) for f in SCAN_FIELDS}
        x = rng.standard_normal((3, 1, 1))
        y = ss2d(Tensor(x), as_scan(four)).data
        single = selective_scan(Tensor(x.reshape(3, 1)), as_scan(one)).data
        assert np.allclose(y.reshape(3, 1), 4 * single, rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_directional_oracles(self, seed):
        rng = np.random.default_rng(seed)
        p = scan_params(rng, 3, 4, 1, k=4)
        x = rng.standard_normal((3, 4, 4))
        got = ss2d(Tensor(x), as_scan(p)).data
        assert np.max(np.abs(got - ss2d_recurrence(x, p))) <= 1e-10

    def test_sum_of_directional_scans_any_order(self, rng):
        p = scan_params(rng, 2, 3, 1, k=4)
        x = rng.standard_normal((2, 3, 4))
        parts = []
        for k, d in enumerate(DIRECTIONS):
            order = direction_order(d, 3, 4)
            seq = x.reshape(2, -1)[:, order]
            y = selective_scan(Tensor(seq), as_scan({f: p[f][k] for f in SCAN_FIELDS})).data
            back = np.zeros_like(seq)
            back[:, order] = y
            parts.append(back.reshape(2, 3, 4))
        got = ss2d(Tensor(x), as_scan(p)).data
        for perm in ([0, 1, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]):
            assert np.allclose(sum(parts[i] for i in perm), got, rtol=0, atol=1e-13)

    def test_batched_equals_per_image(self, rng):
        p = as_scan(scan_params(rng, 2, 3, 1, k=4))
        x = rng.standard_normal((3, 2, 3, 3))
        batched = ss2d(Tensor(x), p).data
        for i in range(3):
            assert np.array_equal(batched[i], ss2d(Tensor(x[i]), p).data)


class TestVSS:
    def test_zero_weights_is_identity(self, rng, store64):
        init_vss(store64.view("v"), rng, 4, 4, 2)
        for name, t in store64.tensors.items():
            if not name.endswith(("gamma", "a_log", "dt_bias")):
                t.data = np.zeros_like(t.data)
        x = rng.standard_normal((2, 4, 3, 5))
        assert np.array_equal(vss_block(Tensor(x), store64.view("v")).data, x)

    @settings(max_examples=10, deadline=None)
    @given(n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(1, 5), w=st.integers(1, 5),
           seed=st.integers(0, 2**31))
    def test_shape_preserving(self, n, c, h, w, seed):
        from mambaulite.params import ParamStore
        rng = np.random.default_rng(seed)
        store = ParamStore(np.float64)
        init_vss(store.view("v"), rng, c, 2, 2)
        assert vss_block(Tensor(rng.standard_normal((n, c, h, w))), store.view("v")).shape == (n, c, h, w)

    def test_default_init_ranges(self, rng, store64):
        init_scan_params(store64.view("s"), rng, 6, 4, 1)
        dt = np.log1p(np.exp(store64["s.dt_bias"].data))
        assert np.all((dt >= 1e-3) & (dt <= 1e-1))
        assert np.allclose(np.exp(store64["s.a_log"].data), np.arange(1, 5))


@pytest.mark.parametrize("check", [c for c in verify.CHECKS if c.group == "ssm_scan"], ids=lambda c: c.name)
def test_gradients(check):
    for seed in range(2):
        assert check.run(seed) <= check.tolerance
