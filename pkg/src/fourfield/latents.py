"""Content/motion codes and the two conditioning networks.

``ContentMapping`` turns a content code into the style vector that modulates
the fields; ``MotionGenerator`` turns a motion code and a time in [0, 1] into
the motion vector added after the first foreground layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP, Dense, Module
from .tensor import Tensor

MOTION_MODES = ("multiply", "concat", "positional")


def sample_unit_sphere(dim: int, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Isotropic unit vectors: normal draws scaled to length one."""
    if dim < 1:
        raise ValueError("sphere dimension must be at least 1")
    shape = (dim,) if n is None else (n, dim)
    v = rng.standard_normal(shape)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    while np.any(norm == 0):  # probability zero, but keep the contract
        v = np.where(norm == 0, rng.standard_normal(shape), v)
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norm


def lerp_sphere(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Linear interpolation followed by renormalization onto the sphere."""
    v = (1.0 - alpha) * a + alpha * b
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class LatentPair:
    z: np.ndarray
    m: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, z_dim: int, m_dim: int, n: int | None = None):
        return cls(sample_unit_sphere(z_dim, rng, n), sample_unit_sphere(m_dim, rng, n))


def _as_batch(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 1:
        return T.reshape(x, (1, x.shape[0])), True
    return x, False


class ContentMapping(Module):
    def __init__(self, rng: np.random.Generator, z_dim: int, w_dim: int, layers: int = 8,
                 slope: float = T.LEAKY_SLOPE):
        sizes = [z_dim] + [w_dim] * layers
        self.net = MLP(rng, sizes, slope)
        self.z_dim = z_dim

    def __call__(self, z) -> Tensor:
        z, single = _as_batch(z)
        if z.shape[-1] != self.z_dim:
            raise T.ShapeError(f"content code has dim {z.shape[-1]}, mapping expects {self.z_dim}")
        w = self.net(T.normalize(z, axis=-1))
        return T.reshape(w, (w.shape[-1],)) if single else w


def time_features(t: np.ndarray, bands: int) -> np.ndarray:
    k = (2.0 ** np.arange(bands)) * np.pi
    ang = np.asarray(t, dtype=float)[..., None] * k
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class MotionGenerator(Module):
    """Three dense layers; time enters between the first and the second.

    ``multiply`` scales the first layer's output by ``t``; ``concat`` appends
    ``t`` as an extra channel; ``positional`` multiplies by sin/cos time
    features repeated across channels.
    """

    def __init__(self, rng: np.random.Generator, m_dim: int, hidden: int, n_dim: int,
                 mode: str = "multiply", time_bands: int = 4, slope: float = T.LEAKY_SLOPE):
        if mode not in MOTION_MODES:
            raise ValueError(f"unknown motion mode {mode!r}")
        self.psi1 = Dense(rng, m_dim, hidden)
        self.psi2 = Dense(rng, hidden + (1 if mode == "concat" else 0), hidden)
        self.psi3 = Dense(rng, hidden, n_dim)
        self.mode, self.time_bands, self.slope = mode, time_bands, slope
        self.m_dim, self.hidden = m_dim, hidden

    def __call__(self, m, t, mode: str | None = None) -> Tensor:
        mode = mode or self.mode
        if mode not in MOTION_MODES:
            raise ValueError(f"unknown motion mode {mode!r}")
        if (mode == "concat") != (self.mode == "concat"):
            raise ValueError(f"network was built for {self.mode!r} conditioning")
        m, single = _as_batch(m)
        if m.shape[-1] != self.m_dim:
            raise T.ShapeError(f"motion code has dim {m.shape[-1]}, generator expects {self.m_dim}")
        B = m.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (B,))
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("time must lie in [0, 1]")
        h = self.psi1(T.normalize(m, axis=-1))
        if mode == "multiply":
            h = h * Tensor(t[:, None])
        elif mode == "concat":
            h = T.concat([h, Tensor(t[:, None])], axis=-1)
        else:
            feats = time_features(t, self.time_bands)
            reps = -(-self.hidden // feats.shape[-1])
            h = h * Tensor(np.tile(feats, (1, reps))[:, : self.hidden])
        h = T.leaky_relu(h, self.slope)
        h = T.leaky_relu(self.psi2(h), self.slope)
        n = self.psi3(h)
        return T.reshape(n, (n.shape[-1],)) if single else n
