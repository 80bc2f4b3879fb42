"""Dense layers, MLPs and seeded weight initialisation."""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from ..rng import SplitMix64, derive_seed
from .autograd import DimensionError, Tensor, matmul, parameter, relu


def init_weights(shape: tuple[int, int], seed: int) -> np.ndarray:
    """Glorot-uniform matrix in ``+-sqrt(6 / (fan_in + fan_out))``."""
    fan_in, fan_out = shape
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"weight shape must be positive, got {shape}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return SplitMix64(seed).uniform(fan_in * fan_out, -bound, bound).reshape(shape)


class Module:
    """Parameter container; parameters are found by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


def _walk(value, path: str):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, seed: int, bias: bool = True):
        self.fan_in, self.fan_out = fan_in, fan_out
        self.weight = parameter(init_weights((fan_in, fan_out), seed))
        self.bias = parameter(np.zeros(fan_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fan_in:
            raise DimensionError(f"input of shape {x.shape} does not match weight of shape {self.weight.shape}")
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class MLP(Module):
    """Shared MLP: affine + ReLU on hidden layers, linear (or ReLU) output.

    Rows are processed independently, so any leading batch axes are allowed.
    """

    def __init__(self, widths: Sequence[int], seed: int, final_relu: bool = False, bias: bool = True):
        if len(widths) < 2:
            raise ValueError(f"an MLP needs at least two widths, got {list(widths)}")
        self.widths = list(widths)
        self.final_relu = final_relu
        self.layers = [
            Linear(a, b, derive_seed(seed, i), bias=bias) for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(params: MLP, x: Tensor) -> Tensor:
    if x.shape[-1] != params.widths[0]:
        raise DimensionError(
            f"input of shape {x.shape} does not match first layer of shape {params.layers[0].weight.shape}"
        )
    last = len(params.layers) - 1
    for i, layer in enumerate(params.layers):
        x = layer(x)
        if i < last or params.final_relu:
            x = relu(x)
    return x
