"""Parameter containers and initialisers shared by the trainable modules."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_mlp(rng: np.random.Generator, sizes: list[int]) -> dict:
    """Weights ``w1, b1, w2, b2, ...`` for a chain of dense layers."""
    p = {}
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        p[f"w{i}"] = glorot(rng, a, b)
        p[f"b{i}"] = zeros(b)
    return p


def flatten(params, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk nested dicts/lists of tensors in declaration order."""
    if isinstance(params, Tensor):
        yield prefix, params
    elif isinstance(params, dict):
        for k, v in params.items():
            yield from flatten(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(params, (list, tuple)):
        for i, v in enumerate(params):
            yield from flatten(v, f"{prefix}.{i}" if prefix else str(i))
    else:
        raise TypeError(f"unexpected parameter container {type(params).__name__} at {prefix!r}")


def param_list(params) -> list[Tensor]:
    return [t for _, t in flatten(params)]


def param_count(params) -> int:
    return sum(t.size for t in param_list(params))
