"""Dense tensors and the gradient tape.

Tensors are immutable 64-bit arrays. Differentiable operations executed while a
``Tape`` is active append an ``OpRecord``; ``backward`` replays the records in
reverse to accumulate gradients, which are owned by the tape.
"""

from __future__ import annotations

import contextvars
import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from lfsynth.errors import ArgumentError, NumericError

logger = logging.getLogger(__name__)

DTYPE = np.float64
STORAGE_DTYPES = {"f32": np.float32, "f64": np.float64}

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "lfsynth_active_tape", default=None
)


def _check_finite(data: np.ndarray, operation: str) -> None:
    if data.size and not np.isfinite(data).all():
        raise NumericError(f"Operation '{operation}' produced non-finite values", operation)


class Tensor:
    """Immutable N-dimensional float64 array with an optional gradient requirement."""

    __slots__ = ("_data", "requires_grad", "name", "op")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        arr = np.array(data, dtype=DTYPE, copy=True)
        _check_finite(arr, name or "tensor")
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.op: str | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool, op: str) -> Tensor:
        """Adopt a freshly computed array without copying it."""
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, op)
        if arr.flags.writeable and arr.base is not None:
            arr = arr.copy()
        arr.setflags(write=False)
        out = cls.__new__(cls)
        out._data = arr
        out.requires_grad = requires_grad
        out.name = None
        out.op = op
        return out

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the values."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(()))

    def detach(self) -> Tensor:
        """Same values, cut from the graph."""
        return Tensor._wrap(self._data, requires_grad=False, op="detach")

    def with_grad(self, requires_grad: bool = True) -> Tensor:
        """A new leaf sharing these values with the requested gradient flag."""
        out = Tensor._wrap(self._data, requires_grad=requires_grad, op="leaf")
        out.name = self.name
        out.op = None
        return out

    def to_storage(self, dtype: str = "f64") -> np.ndarray:
        """Values cast to a checkpoint storage format ("f32" or "f64")."""
        if dtype not in STORAGE_DTYPES:
            raise ArgumentError(f"Unknown storage dtype: {dtype}. Must be one of: f32, f64")
        return self._data.astype(STORAGE_DTYPES[dtype])

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # Operator sugar; the implementations live in ops to keep one place per rule.

    def __add__(self, other: Tensor | float) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.add(self, other)

    def __radd__(self, other: float) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.add(other, self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.sub(self, other)

    def __rsub__(self, other: float) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.sub(other, self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.mul(self, other)

    def __rmul__(self, other: float) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.mul(other, self)

    def __neg__(self) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.neg(self)

    def __getitem__(self, index: Any) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.getitem(self, index)

    def sum(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.reduce_sum(self, axis)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.mean(self, axis)

    def abs(self) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.absolute(self)

    def reshape(self, *shape: int) -> Tensor:
        from lfsynth.diffcore import ops

        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        from lfsynth.diffcore import ops

        return ops.transpose(self, axes or None)


@dataclass
class OpRecord:
    """One recorded operation: inputs, output, and the rule mapping dOut to dInputs."""

    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; the tape is active for the current thread/context
    only, and is single-writer while recording.
    """

    def __init__(self) -> None:
        self.records: list[OpRecord] = []
        self._grads: dict[int, np.ndarray] = {}
        self._consumed = False
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> Tape:
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.records)

    def record(
        self,
        name: str,
        inputs: Sequence[Tensor],
        output: Tensor,
        backward_fn: BackwardFn,
    ) -> None:
        """Append an operation; inputs always precede it in the tape."""
        self.records.append(OpRecord(name, tuple(inputs), output, backward_fn))

    def grad(self, tensor: Tensor) -> np.ndarray | None:
        """Gradient buffer for ``tensor`` after ``backward``, if it was reached."""
        return self._grads.get(id(tensor))

    def reset(self) -> None:
        """Drop gradient buffers so backward may run again."""
        self._grads.clear()
        self._consumed = False

    def leaves(self) -> list[Tensor]:
        """Tensors requiring gradients that were inputs but never outputs, in first-use order."""
        produced = {id(rec.output) for rec in self.records}
        seen: set[int] = set()
        found: list[Tensor] = []
        for rec in self.records:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    found.append(t)
        return found


def active_tape() -> Tape | None:
    """The tape recording in the current context, if any."""
    return _active_tape.get()


def emit(
    name: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: BackwardFn,
) -> Tensor:
    """Wrap an op result and record it on the active tape when a gradient is needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=requires, op=name)
    tape = _active_tape.get()
    if requires and tape is not None:
        tape.record(name, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Args:
        loss: Scalar tensor produced while ``tape`` was recording.
        tape: The recording tape; defaults to the active one.

    Returns:
        Mapping from every requires_grad leaf on the tape to its gradient.
        Leaves not reachable from the loss receive zeros.

    Raises:
        ArgumentError: If the loss is not scalar, no tape is available, or the
            tape was already consumed without ``reset``.
        NumericError: If any propagated gradient is non-finite; the message names
            the operation whose backward rule produced it.
    """
    tape = tape or _active_tape.get()
    if tape is None:
        raise ArgumentError("backward() needs a tape; run the forward pass inside `with Tape()`")
    if loss.size != 1:
        raise ArgumentError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise ArgumentError("backward() already ran on this tape; call tape.reset() first")
    tape._consumed = True

    grads = tape._grads
    grads[id(loss)] = np.ones(loss.shape, dtype=DTYPE)

    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        in_grads = rec.backward(g_out)
        for inp, g_in in zip(rec.inputs, in_grads, strict=True):
            if g_in is None or not inp.requires_grad:
                continue
            if not np.isfinite(g_in).all():
                raise NumericError(
                    f"Non-finite gradient in backward of operation '{rec.name}'", rec.name
                )
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = np.array(g_in, dtype=DTYPE, copy=True).reshape(inp.shape)

    result: dict[Tensor, np.ndarray] = {}
    for leaf in tape.leaves():
        if id(leaf) not in grads:
            grads[id(leaf)] = np.zeros(leaf.shape, dtype=DTYPE)
        result[leaf] = grads[id(leaf)]
    logger.debug(f"backward: {len(tape.records)} ops, {len(result)} leaves")
    return result
