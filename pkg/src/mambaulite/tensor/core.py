"""Tensor value type and the reverse-mode gradient tape.

Every differentiable primitive in :mod:`mambaulite.tensor.ops` computes its
forward value with NumPy and, when a :class:`Tape` is active and at least one
input requires a gradient, appends a tape entry holding a closure that maps the
output cotangent to input cotangents (a vector-Jacobian product).

``backward`` replays the entries of a tape in reverse recording order. Because
an op can only consume values that already exist, recording order is a
topological order of the graph.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, LifecycleError

FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tensor:
    """Dense float array with an optional gradient requirement.

    Feature maps are rank-4 ``(n, c, h, w)``; parameters and scan
    intermediates use whatever rank is natural for them.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum_all(self)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype if dtype is not None else np.float64))


class _Entry:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor], vjp: Callable):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tape:
    """Records primitive applications while active (``with Tape() as tape``).

    Tapes nest; an op is recorded on every active tape. A tape can be replayed
    by :func:`backward` exactly once.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ops(self) -> list[str]:
        return [e.op for e in self.entries]


def grad_enabled() -> bool:
    return bool(_tape_stack())


def record(op: str, out: Tensor, inputs: Iterable, vjp: Callable) -> Tensor:
    """Attach ``vjp`` to ``out`` on every active tape if any input needs a gradient.

    ``vjp(g)`` returns one cotangent (or ``None``) per entry of ``inputs``.
    """
    inputs = tuple(inputs)
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return out
    stack = _tape_stack()
    if not stack:
        return out
    out.requires_grad = True
    entry = _Entry(op, out, inputs, vjp)
    for tape in stack:
        if tape.consumed:
            raise LifecycleError("cannot record onto a tape that has been consumed")
        tape.entries.append(entry)
    return out


class Gradients:
    """Mapping from tensors to accumulated cotangents.

    Looking up a tensor that received no gradient returns exact zeros.
    """

    def __init__(self):
        self._store: dict[int, np.ndarray] = {}
        self._keep: dict[int, Tensor] = {}

    def accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._store:
            self._store[key] = self._store[key] + g
        else:
            self._store[key] = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            self._keep[key] = t

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store

    def get(self, t: Tensor) -> np.ndarray | None:
        return self._store.get(id(t))

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._store.get(id(t))
        if g is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return g

    def __len__(self) -> int:
        return len(self._store)


def backward(tape: Tape, output: Tensor, seed=None) -> Gradients:
    """Reverse-mode sweep over ``tape`` starting from ``output``.

    Returns d(<seed, output>)/d(t) for every tensor ``t`` reached on the tape.
    ``seed`` defaults to ones (so a scalar output yields its plain gradient).
    """
    if tape.consumed:
        raise LifecycleError("tape has already been consumed by backward()")
    if seed is None:
        seed_arr = np.ones(output.shape, dtype=output.dtype)
    else:
        seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=output.dtype)
        if seed_arr.shape != output.shape:
            raise ContractError(f"seed shape {seed_arr.shape} does not match output shape {output.shape}")
    tape.consumed = True
    grads = Gradients()
    grads.accumulate(output, seed_arr)
    for entry in reversed(tape.entries):
        g = grads.get(entry.out)
        if g is None:
            continue
        in_grads = entry.vjp(g)
        for inp, ig in zip(entry.inputs, in_grads):
            if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                continue
            grads.accumulate(inp, ig)
    return grads


class KinkMonitor:
    """Collects activation-pattern fingerprints from non-smooth primitives.

    Two evaluations whose fingerprints differ crossed a non-differentiable
    point (a ReLU sign change or a max/argmax switch) somewhere in the graph.
    """

    def __init__(self):
        self.marks: list[bytes] = []

    def __enter__(self):
        _state.kink = self
        return self

    def __exit__(self, *exc):
        _state.kink = None
        return False

    def fingerprint(self) -> tuple:
        return tuple(self.marks)


def note_kink(pattern: np.ndarray) -> None:
    mon = getattr(_state, "kink", None)
    if mon is not None:
        mon.marks.append(np.ascontiguousarray(pattern).tobytes())
