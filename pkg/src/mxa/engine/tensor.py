"""Tensor and tape primitives for define-by-run reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Nothing is
recorded outside a tape, which makes plain forward passes cheap.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class Tensor:
    """An n-dimensional real array with an accumulated gradient."""

    __slots__ = ("values", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(values)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.values = np.array(arr, dtype=dtype, copy=True)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = bool(requires_grad)
        self.name = name

    # internal constructor that takes ownership of ``values`` without copying
    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.grad = np.zeros_like(values)
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def backward(self, seed=None) -> None:
        tape = current_tape()
        if tape is None:
            raise RuntimeError("backward() needs an active Tape; use tape.backward(output) instead")
        tape.backward(self, seed)

    # operator sugar; the actual rules live in ``ops``
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice_(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis, keepdims)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; every op whose output requires a gradient is
    appended while the tape is active::

        with Tape() as tape:
            y = ops.sigmoid(x)
        tape.backward(y)
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs: tuple, output: Tensor, backward) -> None:
        self.records.append(Record(op, inputs, output, backward))

    def backward(self, output: Tensor, seed=None) -> None:
        """Accumulate d(output)/d(t) into ``t.grad`` for every tensor on the tape."""
        if seed is None:
            if output.size != 1:
                raise ValueError(
                    f"backward on non-scalar output of shape {output.shape} needs an explicit seed"
                )
            seed = np.ones_like(output.values)
        else:
            seed = np.asarray(seed, dtype=output.dtype)
            if seed.shape != output.shape:
                raise ValueError(f"seed shape {seed.shape} does not match output shape {output.shape}")

        grads: dict[int, np.ndarray] = {id(output): seed.copy()}
        tensors: dict[int, Tensor] = {id(output): output}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tensors[key] = t
        for key, g in grads.items():
            t = tensors[key]
            if t.requires_grad or t is output:
                t.grad += g.astype(t.dtype, copy=False)


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def make_output(values: np.ndarray, inputs: tuple, op: str, backward) -> Tensor:
    """Wrap an op result and record it on the active tape when needed."""
    req = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    tape = current_tape()
    out = Tensor._wrap(values, req and tape is not None)
    if out.requires_grad:
        tape.record(op, inputs, out, backward)
    return out


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE
