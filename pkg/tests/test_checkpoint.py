"""Checkpoint serialization: round trips, corruption and architecture mismatch."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambaulite.checkpoint import (MAGIC, VERSION, decode, encode, load_checkpoint, model_from_bytes,
                                   save_checkpoint, to_bytes)
from mambaulite.config import ModelConfig
from mambaulite.errors import ConfigurationError, CorruptionError, IntegrityError, VersionError
from mambaulite.model import build

TINY = ModelConfig(init_channels=8, d_state=4, expand=1, input_size=32)


@pytest.fixture(scope="module")
def tiny():
    model = build(TINY, seed=5)
    model.forward(np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32), training=True)
    return model


@pytest.fixture(scope="module")
def blob(tiny):
    return to_bytes(tiny)


def states_equal(a, b):
    if list(a.params.tensors) != list(b.params.tensors):
        return False
    same = all(x.data.tobytes() == y.data.tobytes()
               for x, y in zip(a.params.tensors.values(), b.params.tensors.values()))
    bufs_a, bufs_b = a.params.buffers(), b.params.buffers()
    return same and bufs_a.keys() == bufs_b.keys() and all(
        bufs_a[k].tobytes() == bufs_b[k].tobytes() for k in bufs_a)


class TestRoundTrip:
    def test_file_round_trip(self, tiny, tmp_path):
        save_checkpoint(tiny, tmp_path / "t.mbul")
        back = load_checkpoint(tmp_path / "t.mbul")
        assert back.config == tiny.config
        assert states_equal(back, tiny)
        x = np.random.default_rng(1).uniform(size=(1, 3, 32, 32)).astype(np.float32)
        assert back.forward(x).data.tobytes() == tiny.forward(x).data.tobytes()

    def test_running_stats_survive(self, tiny):
        back = model_from_bytes(to_bytes(tiny))
        moved = [k for k, v in tiny.params.buffers().items() if k.endswith("running_mean") and v.any()]
        assert moved
        for k in moved:
            assert np.array_equal(back.params.buffers()[k], tiny.params.buffers()[k])

    def test_bytes_stable(self, tiny):
        assert to_bytes(tiny) == to_bytes(model_from_bytes(to_bytes(tiny)))

    def test_no_tmp_left_behind(self, tiny, tmp_path):
        save_checkpoint(tiny, tmp_path / "t.mbul")
        assert [p.name for p in tmp_path.iterdir()] == ["t.mbul"]

    @settings(max_examples=25, deadline=None)
    @given(shapes=st.lists(st.lists(st.integers(0, 4), min_size=0, max_size=3), max_size=5),
           f64=st.booleans(), seed=st.integers(0, 2**31))
    def test_arbitrary_tables(self, shapes, f64, seed):
        rng = np.random.default_rng(seed)
        dt = np.float64 if f64 else np.float32
        arrays = [(f"t{i}.w", rng.standard_normal(s).astype(dt)) for i, s in enumerate(shapes)]
        cfg, back = decode(encode(TINY, arrays))
        assert cfg == TINY
        assert len(back) == len(arrays)
        for (n0, a0), (n1, a1) in zip(arrays, back):
            assert n0 == n1 and a0.dtype == a1.dtype and a0.shape == a1.shape
            assert a0.tobytes() == a1.tobytes()

    def test_unsupported_dtype(self):
        with pytest.raises(ConfigurationError):
            encode(TINY, [("x", np.zeros(3, dtype=np.int32))])


class TestCorruption:
    @pytest.mark.parametrize("cut", [0, 3, 10, 200, -1])
    def test_truncation(self, blob, cut):
        with pytest.raises(CorruptionError):
            model_from_bytes(blob[:cut])

    def test_bit_flip(self, blob):
        bad = bytearray(blob)
        bad[len(bad) // 2] ^= 0x10
        with pytest.raises(CorruptionError, match="checksum"):
            decode(bytes(bad))

    def test_bad_magic(self, blob):
        with pytest.raises(CorruptionError, match="magic"):
            decode(b"XXXX" + blob[4:])

    def test_version(self, blob):
        bumped = MAGIC + struct.pack("<H", VERSION + 1) + blob[6:]
        with pytest.raises(VersionError):
            decode(bumped)

    def test_trailing_bytes(self, tiny):
        from mambaulite.checkpoint import _checksum
        body = to_bytes(tiny)[:-8] + b"\0"
        with pytest.raises(CorruptionError, match="trailing"):
            decode(body + _checksum(body))


class TestMismatch:
    def test_d_state_mismatch_names_tensor(self, tiny):
        other = ModelConfig(init_channels=8, d_state=8, expand=1, input_size=32)
        with pytest.raises(IntegrityError, match=r"a_log"):
            model_from_bytes(to_bytes(tiny), other)

    def test_width_mismatch(self, tiny):
        with pytest.raises(IntegrityError, match="init.w"):
            model_from_bytes(to_bytes(tiny), ModelConfig(init_channels=16, d_state=4, expand=1))

    def test_matching_config_accepted(self, tiny):
        assert states_equal(model_from_bytes(to_bytes(tiny), TINY), tiny)
