"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 or float64). Gradient tracking uses an
explicit tape: while a ``Tape`` is active, every op appends an adjoint
callback, and ``backward`` replays the callbacks in exact reverse execution
order. Tensors are never mutated by ops once produced; optimizers rewrite
leaf data only between forward/backward cycles.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when tensor shapes or dtypes violate an op contract."""


class GraphError(RuntimeError):
    """Raised when the autodiff graph is used outside its contract."""


_TAPE_STACK: list["Tape"] = []


def active_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """N-dimensional float array, optionally participating in a tape.

    ``grad`` accumulates across backward passes until ``zero_grad`` is
    called; repeated backward calls without a reset therefore sum their
    contributions.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # Arithmetic sugar delegates to ops; imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)


class Tape:
    """Ordered record of executed ops sufficient to replay adjoints.

    Ops append ``(output, callback)`` pairs at execution time, so walking the
    record backwards visits ops in exact reverse execution order, which is a
    valid topological order of the data-flow graph. Two tapes never share
    entries or any other mutable state.
    """

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise GraphError("tape stack corrupted: exited out of order")

    def record(self, out: Tensor, callback: Callable[[np.ndarray], None]) -> None:
        self._entries.append((out, callback))

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be a scalar produced while ``tape`` was active. The tape is
    cleared afterwards; leaf gradients are left in place and accumulate if
    another backward pass runs before they are zeroed.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or not any(out is loss for out, _ in tape._entries):
        raise GraphError("loss was not produced under this tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for out, callback in reversed(tape._entries):
            if out.grad is not None:
                callback(out.grad)
    finally:
        tape._entries.clear()


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating on first touch."""
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
