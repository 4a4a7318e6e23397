"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"MBUL"                     magic
    u16                         format version (1)
    u32, bytes                  canonical config text (UTF-8)
    u32                         tensor count
    repeated:
        u16, bytes              tensor name (UTF-8)
        u8                      dtype code (1 = float32, 2 = float64)
        u8, u32 * rank          rank and dims
        bytes                   raw little-endian values
    u64                         blake2b-64 checksum of every preceding byte

Trainable parameters come first in registration order, followed by the
batch-norm running statistics (``<name>.running_mean`` / ``.running_var``).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ConfigurationError, CorruptionError, IntegrityError, VersionError
from .model import MambaULite, build

MAGIC = b"MBUL"
VERSION = 1
CHECKSUM_BYTES = 8
DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


def _named_arrays(model: MambaULite) -> list[tuple[str, np.ndarray]]:
    items = [(k, t.data) for k, t in model.params.tensors.items()]
    items += list(model.params.buffers().items())
    return items


def encode(config: ModelConfig, arrays) -> bytes:
    """Serialize a config and an ordered sequence of (name, array) pairs."""
    text = config.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(text)), text, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in DTYPE_CODES:
            raise ConfigurationError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<BB{arr.ndim}I", DTYPE_CODES[dt], arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + _checksum(body)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(f"unexpected end of checkpoint at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[ModelConfig, list[tuple[str, np.ndarray]]]:
    """Parse checkpoint bytes; raises on bad magic, version or checksum."""
    if len(data) < len(MAGIC) + 2 + CHECKSUM_BYTES:
        raise CorruptionError(f"checkpoint too short ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise CorruptionError("bad magic bytes; not a checkpoint")
    (version,) = struct.unpack("<H", data[4:6])
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (reader supports {VERSION})")
    body, tail = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if _checksum(body) != tail:
        raise CorruptionError("checksum mismatch; file is truncated or corrupted")
    r = _Reader(body)
    r.take(6)
    (text_len,) = r.unpack("<I")
    try:
        config = ModelConfig.from_text(r.take(text_len).decode("utf-8"))
    except (UnicodeDecodeError, ConfigurationError) as exc:
        raise CorruptionError(f"embedded config unreadable: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise CorruptionError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        arrays.append((name, arr))
    if r.pos != len(body):
        raise CorruptionError(f"{len(body) - r.pos} trailing bytes after tensor table")
    return config, arrays


def _check_against(expected: list[tuple[str, np.ndarray]], arrays: list[tuple[str, np.ndarray]]) -> None:
    for i, (name, ref) in enumerate(expected):
        if i >= len(arrays):
            raise IntegrityError(f"tensor {name!r} missing from checkpoint")
        got_name, got = arrays[i]
        if got_name != name or got.shape != ref.shape:
            raise IntegrityError(
                f"tensor {name!r}: expected shape {ref.shape}, checkpoint has {got_name!r} {got.shape}")
    if len(arrays) > len(expected):
        raise IntegrityError(f"unexpected extra tensor {arrays[len(expected)][0]!r} in checkpoint")


def model_from_bytes(data: bytes, config: ModelConfig | None = None) -> MambaULite:
    stored_config, arrays = decode(data)
    target = config or stored_config
    model = build(target, seed=0)
    _check_against(_named_arrays(model), arrays)
    store = model.params
    for name, arr in arrays:
        if name in store.tensors:
            store.tensors[name].data = arr.astype(store.dtype)
        else:
            stat, field = name.rsplit(".", 1)
            rs = store.stats[stat]
            getattr(rs, "mean" if field == "running_mean" else "var")[...] = arr
    return model


def to_bytes(model: MambaULite) -> bytes:
    return encode(model.config, _named_arrays(model))


def save_checkpoint(model: MambaULite, path) -> int:
    """Write ``model`` atomically to ``path``; returns the number of bytes written."""
    data = to_bytes(model)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return len(data)


def load_checkpoint(path, config: ModelConfig | None = None) -> MambaULite:
    """Read a checkpoint; with ``config`` the tensors must fit that architecture."""
    return model_from_bytes(Path(path).read_bytes(), config)


@dataclass(frozen=True)
class MemoryReport:
    total_bytes: int
    param_bytes: int
    overhead_bytes: int      # header, tensor table, running statistics, checksum


def memory_size(model: MambaULite) -> MemoryReport:
    """Exact size of the serialized checkpoint, split into parameter payload and overhead."""
    total = len(to_bytes(model))
    params = sum(t.data.nbytes for t in model.params.tensors.values())
    return MemoryReport(total, params, total - params)
