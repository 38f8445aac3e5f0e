"""Tensor container and the explicit recording tape used for reverse-mode AD.

A :class:`Tape` is opened per forward pass (``with Tape() as tape:``).  While a
tape is active, every differentiable op whose inputs require gradients appends
one record: the output tensor, the input tensors and a closure mapping the
output gradient to input gradients.  ``tape.backward(loss)`` replays the
records in reverse order.  Outside an active tape ops compute values only.
Tensors refer to their tape weakly, so keep the tape object alive until
backward has run.
"""

from __future__ import annotations

import contextvars
import weakref
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

_PRECISIONS = {"single": np.float32, "double": np.float64}

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "murax_active_tape", default=None
)


class TensorError(ValueError):
    """Raised for shape, precision or tape misuse."""


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    return np.ascontiguousarray(arr, dtype=dtype)


class Tensor:
    """Dense real array with optional gradient tracking.

    ``data`` is a contiguous float32 or float64 numpy array.  ``grad`` is
    populated by :meth:`Tape.backward` for leaf tensors with
    ``requires_grad=True``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(dtype, str):
            dtype = _PRECISIONS[dtype]
        self.data = _as_array(data, dtype)
        if self.data.ndim == 0:
            self.data = self.data.reshape(())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._tape = None  # weak reference to the producing Tape, if any

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "double" if self.data.dtype == np.float64 else "single"

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision}{flag})"

    # arithmetic sugar used by tests and the gradient checker
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self):
        from . import ops

        return ops.sum_all(self)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: List[_Record] = []
        self._token = None
        # outputs point back here weakly so a dropped tape and its activations are freed promptly
        self._ref = weakref.ref(self)

    def __enter__(self) -> "Tape":
        if self._token is not None:
            raise TensorError("tape is already active")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
        out.requires_grad = True
        out._tape = self._ref
        self.records.append(_Record(out, tuple(inputs), backward_fn))
        return out

    def reset(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` of every reachable leaf with d(loss)/d(leaf).

        Leaf gradients accumulate additively across calls, so replaying the
        same tape twice doubles them.
        """
        if loss.data.size != 1:
            raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self._ref:
            raise TensorError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.backward_fn(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self._ref:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    key = id(t)
                    prev = leaf_grads.get(key)
                    leaf_grads[key] = (t, gi if prev is None else prev[1] + gi)
        for t, g in leaf_grads.values():
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def backward(loss: Tensor) -> None:
    """Run backward on the tape that produced ``loss``."""
    tape = loss._tape() if loss._tape is not None else None
    if tape is None:
        raise TensorError("loss was not produced on an active tape")
    tape.backward(loss)


def tracking(*inputs: Tensor) -> Optional[Tape]:
    """Return the active tape if any input requires a gradient."""
    tape = _active_tape.get()
    if tape is None:
        return None
    for t in inputs:
        if t is not None and t.requires_grad:
            return tape
    return None


def check_precision(*inputs: Optional[Tensor]) -> np.dtype:
    dtypes = {t.data.dtype for t in inputs if t is not None}
    if len(dtypes) > 1:
        raise TensorError(f"mixed precision in one op: {sorted(str(d) for d in dtypes)}")
    return dtypes.pop()
