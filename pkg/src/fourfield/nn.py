"""Parameter containers and the layer types shared by every network."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

DEMOD_EPS = 1e-8


class Module:
    """Walks attributes in assignment order to name parameters deterministically."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())


class Dense(Module):
    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int,
                 bias: bool = True, bias_init: float = 0.0):
        self.weight = T.param(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        self.bias = T.param(np.full(fan_out, bias_init)) if bias else None
        self.fan_in, self.fan_out = fan_in, fan_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fan_in:
            raise T.ShapeError(f"dense layer expects {self.fan_in} inputs, got {x.shape[-1]}")
        squeeze = x.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, x.shape[0]))
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return T.reshape(y, (self.fan_out,)) if squeeze else y


class MLP(Module):
    """Plain fully connected stack with leaky ReLU between layers (not after the last)."""

    def __init__(self, rng: np.random.Generator, sizes: list[int], slope: float = T.LEAKY_SLOPE):
        self.layers = [Dense(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        self.slope = slope

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.leaky_relu(x, self.slope)
        return x


class ModulatedDense(Module):
    """Style-modulated affine layer with weight demodulation.

    A per-sample scale ``s = A(w)`` multiplies each input channel of the weight,
    every output column is renormalized by ``1/sqrt(sum(W'^2) + eps)`` and the
    bias is added unmodulated. Inputs are batched as (B, N, fan_in) with one
    style per batch item.
    """

    def __init__(self, rng: np.random.Generator, w_dim: int, fan_in: int, fan_out: int):
        self.affine = Dense(rng, w_dim, fan_in, bias_init=1.0)
        self.weight = T.param(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        self.bias = T.param(np.zeros(fan_out))
        self.fan_in, self.fan_out = fan_in, fan_out

    def styles(self, w: Tensor) -> Tensor:
        return self.affine(w)

    def __call__(self, x: Tensor, w: Tensor) -> Tensor:
        return self.apply_scale(x, self.styles(w))

    def apply_scale(self, x: Tensor, s: Tensor) -> Tensor:
        if x.shape[-1] != self.fan_in or s.shape[-1] != self.fan_in:
            raise T.ShapeError(
                f"modulated layer expects {self.fan_in} inputs, got {x.shape[-1]} / style {s.shape[-1]}")
        B = s.shape[0]
        # (x * s) @ W == x @ (diag(s) W); demod is the column norm of diag(s) W
        demod = T.power(T.matmul(s * s, self.weight * self.weight) + DEMOD_EPS, -0.5)
        y = T.matmul(x * T.reshape(s, (B, 1, self.fan_in)), self.weight)
        return y * T.reshape(demod, (B, 1, self.fan_out)) + self.bias


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, cin: int, cout: int, kernel: int,
                 stride: int = 1, padding: int = 0):
        fan_in = cin * kernel * kernel
        self.weight = T.param(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (kernel, kernel, cin, cout)))
        self.bias = T.param(np.zeros(cout))
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)
