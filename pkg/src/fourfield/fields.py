"""Implicit scene networks: the motion-conditioned foreground and the background.

Both fields are stacks of style-modulated layers over Fourier features of the
query point. The foreground adds the motion vector once, right after its first
layer; the background sees only the content style and takes points in inverse
sphere coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Dense, Module, ModulatedDense
from .tensor import Tensor


@dataclass
class FieldSample:
    feature: Tensor  # (B, N, D_f)
    density: Tensor  # (B, N, 1), non-negative


def positional_encode(x, bands: int) -> Tensor:
    """[sin(2^k pi c), cos(2^k pi c)] for k < bands, per coordinate c.

    Output is ordered coordinate-major and has ``2 * bands * dim`` channels;
    the raw coordinate is not appended.
    """
    if bands < 1:
        raise ValueError("band count must be at least 1")
    x = T.as_tensor(x)
    d = x.shape[-1]
    lead = x.shape[:-1]
    freqs = Tensor((2.0 ** np.arange(bands)) * np.pi)
    ang = T.reshape(x, lead + (d, 1)) * freqs
    pair = T.concat([T.reshape(T.sin(ang), lead + (d, bands, 1)),
                     T.reshape(T.cos(ang), lead + (d, bands, 1))], axis=-1)
    return T.reshape(pair, lead + (2 * bands * d,))


def inverse_sphere_param(x: np.ndarray) -> np.ndarray:
    """Map points with ``|x| >= 1`` to ``(x/|x|, 1/|x|)``."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(r < 1.0 - 1e-9):
        raise ValueError("inverse sphere parameterization needs points outside the unit sphere")
    return np.concatenate([x / r, 1.0 / r], axis=-1)


def density_activation(kind: str, x: Tensor) -> Tensor:
    if kind == "softplus":
        return T.softplus(x)
    if kind == "relu":
        return T.leaky_relu(x, 0.0)
    raise ValueError(f"unknown density activation {kind!r}")


class _ModulatedField(Module):
    def __init__(self, rng, in_dim, w_dim, layers, hidden, feature_dim, slope, activation):
        if layers < 2:
            raise ValueError("a field needs at least two layers")
        sizes = [in_dim] + [hidden] * (layers - 1) + [feature_dim]
        self.layers = [ModulatedDense(rng, w_dim, a, b) for a, b in zip(sizes[:-1], sizes[1:])]
        self.sigma1 = Dense(rng, feature_dim, feature_dim)
        self.sigma2 = Dense(rng, feature_dim, 1)
        self.slope, self.activation = slope, activation

    def _density(self, feature: Tensor) -> Tensor:
        h = T.leaky_relu(self.sigma1(feature), self.slope)
        return density_activation(self.activation, self.sigma2(h))

    def _run(self, h: Tensor, w: Tensor, inject: Tensor | None) -> FieldSample:
        for i, layer in enumerate(self.layers):
            h = layer(h, w)
            if i == 0 and inject is not None:
                h = h + inject
            if i < len(self.layers) - 1:
                h = T.leaky_relu(h, self.slope)
        return FieldSample(h, self._density(h))


class ForegroundField(_ModulatedField):
    def __init__(self, rng: np.random.Generator, w_dim: int, n_dim: int, layers: int = 4,
                 hidden: int = 64, feature_dim: int = 32, bands: int = 10,
                 slope: float = T.LEAKY_SLOPE, activation: str = "softplus"):
        super().__init__(rng, 6 * bands, w_dim, layers, hidden, feature_dim, slope, activation)
        # the motion vector is added to the first layer's output; map it there when widths differ
        self.adapter = Dense(rng, n_dim, hidden, bias=False) if n_dim != hidden else None
        self.bands, self.n_dim = bands, n_dim

    def __call__(self, x, w: Tensor, n: Tensor | None) -> FieldSample:
        """``x`` (B,N,3), ``w`` (B,D_w), ``n`` (B,D_n) or None for the static field."""
        x = T.as_tensor(x)
        inject = None
        if n is not None:
            if n.shape[-1] != self.n_dim:
                raise T.ShapeError(f"motion vector has dim {n.shape[-1]}, field expects {self.n_dim}")
            if self.adapter is not None:
                n = self.adapter(n)
            inject = T.reshape(n, (n.shape[0], 1, n.shape[-1]))
        return self._run(positional_encode(x, self.bands), w, inject)


class BackgroundField(_ModulatedField):
    def __init__(self, rng: np.random.Generator, w_dim: int, layers: int = 4, hidden: int = 16,
                 feature_dim: int = 32, bands: int = 10, slope: float = T.LEAKY_SLOPE,
                 activation: str = "softplus"):
        super().__init__(rng, 8 * bands, w_dim, layers, hidden, feature_dim, slope, activation)
        self.bands = bands

    def __call__(self, x4, w: Tensor) -> FieldSample:
        """``x4`` (B,N,4) inverse-sphere points; content style only."""
        x4 = T.as_tensor(x4)
        inv_r = x4.data[..., 3]
        if np.any(inv_r <= 0) or np.any(inv_r > 1 + 1e-12):
            raise ValueError("background points need an inverse radius in (0, 1]")
        return self._run(positional_encode(x4, self.bands), w, None)
