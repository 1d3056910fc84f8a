"""Elementwise, linear-algebra, reduction and shape operations.

Broadcasting is deliberately narrow: operands must have equal shapes, one of
them must be a scalar constant, or both must have the same rank with the
smaller operand holding size-1 axes (per-channel ``B x C x 1 x 1``, per-pixel
``B x 1 x H x W``, bias rows ``1 x D``).
"""

from __future__ import annotations

import numbers

import numpy as np

from .tensor import Tensor, make_output

ELEMENTWISE_KINDS = ("add", "sub", "mul", "sigmoid", "relu", "softplus", "scale")


def _check_broadcast(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) != len(b):
        raise ValueError(f"unsupported broadcast between shapes {a} and {b}")
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ValueError(f"unsupported broadcast between shapes {a} and {b}")
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _is_const(x) -> bool:
    return isinstance(x, numbers.Real) and not isinstance(x, bool)


def add(a: Tensor, b) -> Tensor:
    if _is_const(b):
        return make_output(a.values + b, (a,), "add", lambda g: (g,))
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_output(
        a.values + b.values, (a, b), "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a: Tensor, b) -> Tensor:
    if _is_const(b):
        return make_output(a.values - b, (a,), "sub", lambda g: (g,))
    _check_broadcast(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_output(
        a.values - b.values, (a, b), "sub",
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a: Tensor, b) -> Tensor:
    if _is_const(b):
        return scale(a, b)
    _check_broadcast(a.shape, b.shape)
    av, bv = a.values, b.values

    def backward(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return make_output(av * bv, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_output(a.values * c, (a,), "scale", lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return make_output(-a.values, (a,), "neg", lambda g: (-g,))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Sigmoid that never exponentiates a large positive number."""
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def stable_softplus(x: np.ndarray) -> np.ndarray:
    return (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype, copy=False)


def sigmoid(a: Tensor) -> Tensor:
    s = stable_sigmoid(a.values)
    return make_output(s, (a,), "sigmoid", lambda g: (g * s * (1 - s),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return make_output(np.where(mask, a.values, 0).astype(a.dtype), (a,), "relu", lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.values
    return make_output(stable_softplus(x), (a,), "softplus", lambda g: (g * stable_sigmoid(x),))


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``b`` is a Tensor or constant for binary kinds."""
    if op_kind == "add":
        return add(a, b)
    if op_kind == "sub":
        return sub(a, b)
    if op_kind == "mul":
        return mul(a, b)
    if op_kind == "scale":
        return scale(a, b)
    if op_kind == "sigmoid":
        return sigmoid(a)
    if op_kind == "relu":
        return relu(a)
    if op_kind == "softplus":
        return softplus(a)
    raise ValueError(f"unknown elementwise op {op_kind!r}; expected one of {ELEMENTWISE_KINDS}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes must match, or ``b`` may be a shared 2-D matrix."""
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul batch dimensions differ: {av.shape} @ {bv.shape}")
    if bv.ndim == 2 and av.ndim > 2:
        out = (av.reshape(-1, av.shape[-1]) @ bv).reshape(av.shape[:-1] + (bv.shape[-1],))
    else:
        out = av @ bv

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bv, -1, -2)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return make_output(out, (a, b), "matmul", backward)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.values.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output(np.asarray(out, dtype=a.dtype), (a,), "sum", backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axes, keepdims), 1.0 / n)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty list")
    ndim = tensors[0].ndim
    axis = _norm_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != s0 for i, (s, s0) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise ValueError(
                f"cannot concat shapes {[x.shape for x in tensors]} along axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.values for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_output(out, tuple(tensors), "concat", backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.values.reshape(shape)
    return make_output(out, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None or len(axes) == 0:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return make_output(a.values.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inv),))


def slice_(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) slicing with an adjoint that scatters into zeros."""
    out = a.values[index]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_output(np.array(out, copy=True), (a,), "slice", backward)


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` as for :func:`numpy.pad`."""
    pad_width = [tuple(p) for p in pad_width]
    out = np.pad(a.values, pad_width)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(pad_width, a.shape))
    return make_output(out, (a,), "pad", lambda g: (g[index],))


def softmax(a: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Softmax along ``axis``; ``mask`` is an additive constant array (e.g. -1e9 for blocked keys)."""
    x = a.values if mask is None else a.values + mask
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_output(p.astype(a.dtype, copy=False), (a,), "softmax", backward)
