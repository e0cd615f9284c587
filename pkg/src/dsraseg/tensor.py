"""Dense float64 tensors with a reverse-mode tape.

Ops only record onto a tape when one is active (``with Tape() as tape:``)
and at least one input requires grad; outside a tape every op is a plain
numpy computation, which is what inference and finite differencing use.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_tape_stack: list["Tape"] = []
_relu_trace: list[np.ndarray] | None = None


class TapeError(RuntimeError):
    pass


class _Record:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.fn = fn


class Tape:
    """Ordered record of executed ops, replayed in reverse by :meth:`backward`."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], fn: BackwardFn) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        out._tape = self
        self.records.append(_Record(out, inputs, fn))

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = pending.pop(id(rec.out), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi
        self.consumed = True
        self.records.clear()


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """N-d real array (NCHW for images) with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float64):
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced under an active tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), like.shape))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(out: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and grads are needed."""
    t = Tensor(out)
    tape = active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.record(t, inputs, fn)
    return t


def _check_batch_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if (
        a.ndim == b.ndim
        and a.ndim > 0
        and a.shape[1:] == b.shape[1:]
        and (a.shape[0] == 1 or b.shape[0] == 1)
    ):
        return
    raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_batch_broadcast(a, b, "add")
    return make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_batch_broadcast(a, b, "sub")
    return make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _check_batch_broadcast(a, b, "mul")
    return make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    return make(a.data * s, (a,), lambda g: (g * s,))


class trace_relu:
    """Collect the on/off mask of every relu evaluated inside the block."""

    def __enter__(self) -> list[np.ndarray]:
        global _relu_trace
        self._prev = _relu_trace
        self.masks: list[np.ndarray] = []
        _relu_trace = self.masks
        return self.masks

    def __exit__(self, *exc) -> None:
        global _relu_trace
        _relu_trace = self._prev


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    if _relu_trace is not None:
        _relu_trace.append(pos)
    return make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return make(y, (a,), lambda g: (g * y * (1.0 - y),))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape mismatch {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)))


def tsum(a: Tensor) -> Tensor:
    return make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return make(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),)
    )
