"""Minimal parameter container shared by the network components."""

from __future__ import annotations

import numpy as np

from .engine import Tensor


class Module:
    """Holds parameter tensors and child modules as attributes.

    Parameter names are dotted attribute paths in definition order, which is
    also the canonical checkpoint key order.
    """

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[path] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(path + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{path}.{i}."))
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def uniform_param(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    """Uniform in +-sqrt(1/fan_in)."""
    bound = float(np.sqrt(1.0 / fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
