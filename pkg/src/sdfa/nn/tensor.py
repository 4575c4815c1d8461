"""Tensors, parameters and the gradient tape.

Operations in :mod:`sdfa.nn.ops` record a backward closure on the active
:class:`Tape` whenever one of their inputs requires a gradient. Outside a
``with Tape():`` block nothing is recorded, which is the inference path.
"""
from __future__ import annotations

import threading

import numpy as np

from ..errors import UsageError

_local = threading.local()


class Tensor:
    """Dense ``(N, C, T, V)`` (or lower-rank) value grid with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"


class Param(Tensor):
    """Learnable tensor with its own gradient accumulator and momentum buffer."""

    __slots__ = ("name", "velocity")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0)


def _stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Records backward closures in forward order and replays them in reverse."""

    def __init__(self):
        self._ops: list = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, fn) -> None:
        self._ops.append(fn)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if not self._ops or not loss.requires_grad:
            raise UsageError("backward called before a recorded forward pass")
        if grad is None:
            if loss.data.size != 1:
                raise UsageError("a non-scalar output needs an explicit upstream gradient")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.dtype)
        ops, self._ops = self._ops, []
        for fn in reversed(ops):
            fn()


def accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if isinstance(t, Param):
        t.grad += g
    elif t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def make_output(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap ``data`` and, if any parent needs a gradient, record ``backward(g)``."""
    out = Tensor(data)
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True

    def run():
        g = out.grad
        if g is None:
            return
        out.grad = None
        backward(g)

    tape.record(run)
    return out
