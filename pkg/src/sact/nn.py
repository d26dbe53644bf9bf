"""Parameter containers, initializers and layer normalization."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .tensor import Tensor, _node, add, mul


def param(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def init_matrix(rng: np.random.Generator, rows: int, cols: int, gain: float = 1.0) -> Tensor:
    return param(rng.normal(0.0, gain / np.sqrt(rows), size=(rows, cols)))


def zeros(*shape: int) -> Tensor:
    return param(np.zeros(shape))


def ones(*shape: int) -> Tensor:
    return param(np.ones(shape))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses, lists and dicts, yielding every Tensor with a dotted name."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, dict):
        for key in obj:
            yield from named_parameters(obj[key], _join(prefix, str(key)))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, _join(prefix, str(i)))


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def parameter_dict(obj) -> dict[str, Tensor]:
    return dict(named_parameters(obj))


def assign_parameters(obj, values: dict[str, np.ndarray]) -> None:
    params = parameter_dict(obj)
    missing = sorted(set(params) - set(values))
    extra = sorted(set(values) - set(params))
    if missing or extra:
        raise KeyError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in params.items():
        v = np.asarray(values[name], dtype=np.float64)
        if v.shape != p.shape:
            raise ValueError(f"{name}: expected shape {p.shape}, got {v.shape}")
        p.data[...] = v


def _normalize(x: Tensor, eps: float) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(xd.var(axis=-1, keepdims=True) + eps)
    y = (xd - mu) * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _node(y, (x,), bw, "normalize")


@dataclasses.dataclass
class LayerNorm:
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, dim: int) -> LayerNorm:
        return cls(ones(dim), zeros(dim))

    def __call__(self, x: Tensor, eps: float = 1e-5) -> Tensor:
        return add(mul(_normalize(x, eps), self.gain), self.bias)
