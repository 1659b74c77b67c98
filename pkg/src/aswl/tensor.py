"""Dense tensors and a define-by-run gradient tape.

Values are stored as contiguous numpy arrays (row-major). While a ``Tape``
is active, every differentiable operation appends a record holding a
closure for its local gradient rule; walking the records in reverse
execution order propagates gradients to every tensor that requested them.
A tape is rebuilt each training iteration, which is what lets pruning
masks change between iterations without any graph surgery.

Training runs in float32. A float64 mode exists for gradient verification
and is enabled per-scope with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ShapeError, StateError

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _tls():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.dtype = np.float32
    return _state


def default_dtype() -> np.dtype:
    """Dtype used for tensors created from plain Python data."""
    return np.dtype(_tls().dtype)


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt.type not in _FLOAT_DTYPES:
        raise ValueError(f"unsupported tensor dtype {dt}; use float32 or float64")
    _tls().dtype = dt.type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ('float32' or 'float64')."""
    tls = _tls()
    previous = tls.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        tls.dtype = previous


class Tensor:
    """An n-dimensional array of reals, optionally tracked for gradients.

    ``data`` is always C-contiguous so the flat row-major view matches the
    logical element order. ``grad`` is populated by :func:`backward` and is
    an array of the same shape and dtype as ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_DTYPES:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=dtype or default_dtype())
        if not arr.flags["C_CONTIGUOUS"]:   # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, have shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("op", "inputs", "output", "rule")

    def __init__(self, op, inputs, output, rule):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.rule = rule


class Tape:
    """Ordered record of executed operations for one forward pass.

    Usable as a context manager; ops executed inside the block are
    recorded when any of their inputs requires a gradient.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _tls().tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        tapes = _tls().tapes
        if not tapes or tapes[-1] is not self:
            raise StateError("tape context exited out of order")
        tapes.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               rule: Callable[[np.ndarray], None]) -> None:
        self._records.append(_Record(op, tuple(inputs), output, rule))
        self._outputs.add(id(output))

    @property
    def num_recorded(self) -> int:
        return len(self._records)

    def operation_names(self) -> list[str]:
        return [r.op for r in self._records]

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def reset(self) -> None:
        self._records.clear()
        self._outputs.clear()

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def active_tape() -> Tape | None:
    tapes = _tls().tapes
    return tapes[-1] if tapes else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate gradients from ``loss`` through every recorded operation.

    Every tensor touched by the tape gets a zeroed gradient slot first, the
    loss slot is seeded with one, and the records are replayed once each in
    reverse execution order. The tape stays intact afterwards; call
    ``tape.reset()`` to reuse it.
    """
    if tape.num_recorded == 0:
        raise StateError("backward on a tape with no recorded operations")
    if not tape.produced(loss):
        raise StateError("loss tensor was not produced on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, have shape {loss.shape}")

    for rec in tape._records:
        rec.output.zero_grad()
        for t in rec.inputs:
            if t.requires_grad:
                t.zero_grad()
    loss.grad = np.ones_like(loss.data)

    for rec in reversed(tape._records):
        rec.rule(rec.output.grad)


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    """Filter tensors down to the ones tracked for gradients."""
    return [t for t in tensors if t.requires_grad]
