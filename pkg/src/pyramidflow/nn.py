"""Parameter initialisers and conv building blocks shared by all modules.

Parameters live in flat ``dict[str, Parameter]`` stores with dotted names.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Parameter, Tensor

Params = dict  # name -> Parameter


def default_groups(z: int, cap: int = 8) -> int:
    """Largest divisor of ``z`` not above ``cap``."""
    return max(g for g in range(1, min(cap, z) + 1) if z % g == 0)


def kaiming(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def add_conv(params: Params, name: str, rng: np.random.Generator, cin: int, cout: int,
             k: int, bias: bool = True, std: float | None = None) -> None:
    shape = (cout, cin, k, k)
    w = kaiming(rng, shape) if std is None else rng.normal(0.0, std, size=shape)
    params[f"{name}.weight"] = Parameter(w, f"{name}.weight")
    if bias:
        params[f"{name}.bias"] = Parameter(np.zeros(cout), f"{name}.bias")


def add_gn(params: Params, name: str, z: int) -> None:
    params[f"{name}.gamma"] = Parameter(np.ones(z), f"{name}.gamma")
    params[f"{name}.beta"] = Parameter(np.zeros(z), f"{name}.beta")


def add_conv_block(params: Params, name: str, rng, cin: int, cout: int, k: int = 3) -> None:
    add_conv(params, f"{name}.conv", rng, cin, cout, k)
    add_gn(params, f"{name}.gn", cout)


def conv(x: Tensor, params: Params, name: str, stride: int = 1) -> Tensor:
    return ops.conv2d(x, params[f"{name}.weight"], params.get(f"{name}.bias"), stride=stride)


def gn(x: Tensor, params: Params, name: str) -> Tensor:
    z = x.shape[1]
    return ops.group_norm(x, default_groups(z), params[f"{name}.gamma"], params[f"{name}.beta"])


def conv_block(x: Tensor, params: Params, name: str, stride: int = 1) -> Tensor:
    """conv -> group norm -> ReLU."""
    return ops.relu(gn(conv(x, params, f"{name}.conv", stride), params, f"{name}.gn"))


def subset(params: Params, prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


def snapshot(params: Params) -> dict:
    return {k: v.data.copy() for k, v in params.items()}
