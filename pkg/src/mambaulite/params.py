"""Named parameter storage and initializers.

Parameters live in a flat, insertion-ordered mapping keyed by dotted path
(``enc1.pmamba.vss0.ss2d.w_b``). Blocks receive a :class:`ParamView`, which is
the same store seen through a name prefix.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .errors import ConfigurationError
from .tensor import RunningStats, Tensor


class ParamStore:
    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.stats: "OrderedDict[str, RunningStats]" = OrderedDict()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self.tensors:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=trainable, name=name)
        self.tensors[name] = t
        return t

    def add_stats(self, name: str, channels: int) -> RunningStats:
        if name in self.stats:
            raise ConfigurationError(f"duplicate running-stats name {name!r}")
        rs = RunningStats(channels, dtype=self.dtype)
        self.stats[name] = rs
        return rs

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def view(self, prefix: str = "") -> "ParamView":
        return ParamView(self, prefix)

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def named_trainable(self) -> Iterator[tuple[str, Tensor]]:
        return ((k, t) for k, t in self.tensors.items() if t.requires_grad)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values() if t.requires_grad)

    def buffers(self) -> "OrderedDict[str, np.ndarray]":
        """Non-trainable arrays (batch-norm running statistics) by dotted name."""
        out = OrderedDict()
        for name, rs in self.stats.items():
            out[f"{name}.running_mean"] = rs.mean
            out[f"{name}.running_var"] = rs.var
        return out

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(dtype)
        for k, t in self.tensors.items():
            other.add(k, t.data.astype(dtype), trainable=t.requires_grad)
        for k, rs in self.stats.items():
            new = other.add_stats(k, rs.mean.shape[0])
            new.mean[...] = rs.mean
            new.var[...] = rs.var
            new.momentum = rs.momentum
        return other


class ParamView:
    """Prefix-scoped window onto a :class:`ParamStore`."""

    def __init__(self, store: ParamStore, prefix: str = ""):
        self.store = store
        self.prefix = prefix

    def _full(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def sub(self, name: str) -> "ParamView":
        return ParamView(self.store, self._full(name))

    def __getitem__(self, name: str) -> Tensor:
        return self.store[self._full(name)]

    def __contains__(self, name: str) -> bool:
        return self._full(name) in self.store

    def get(self, name: str) -> Tensor | None:
        full = self._full(name)
        return self.store[full] if full in self.store else None

    def running(self, name: str) -> RunningStats:
        return self.store.stats[self._full(name)]

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        return self.store.add(self._full(name), value, trainable)

    def add_stats(self, name: str, channels: int) -> RunningStats:
        return self.store.add_stats(self._full(name), channels)

    @property
    def dtype(self):
        return self.store.dtype


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int | None = None) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)); fan_in defaults to prod(shape[1:])."""
    if fan_in is None:
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def add_conv(p: ParamView, name: str, rng, c_out: int, c_in: int, k: int | tuple = 1, bias: bool = True):
    kh, kw = (k, k) if isinstance(k, int) else k
    p.add(f"{name}.w", fan_in_uniform(rng, (c_out, c_in, kh, kw)))
    if bias:
        p.add(f"{name}.b", np.zeros(c_out))


def add_norm(p: ParamView, name: str, c: int, running: bool = False):
    p.add(f"{name}.gamma", np.ones(c))
    p.add(f"{name}.beta", np.zeros(c))
    if running:
        p.add_stats(name, c)
