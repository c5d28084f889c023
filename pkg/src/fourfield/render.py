"""Cameras, rays, ordered volume compositing and the 2D output head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fields import positional_encode
from .nn import Conv2d, Dense, Module, ModulatedDense
from .tensor import Tensor

UP = np.array([0.0, 1.0, 0.0])
# optical depth used for the last background sample; closes every ray
FAR_DELTA = 1e10


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray
    pitch: float
    yaw: float
    fov_deg: float

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        forward = -self.position / np.linalg.norm(self.position)
        right = np.cross(forward, UP)
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("camera looks along the up vector")
        right = right / norm
        return forward, right, np.cross(right, forward)


def pose_from_angles(pitch: float, yaw: float, fov_deg: float = 18.0) -> CameraPose:
    """Point on the unit sphere at (pitch, yaw) from the frontal +z direction."""
    if not 0 < fov_deg < 120:
        raise ValueError("field of view must lie in (0, 120) degrees")
    cp = np.cos(pitch)
    pos = np.array([cp * np.sin(yaw), np.sin(pitch), cp * np.cos(yaw)])
    return CameraPose(pos, float(pitch), float(yaw), float(fov_deg))


def sample_camera(rng: np.random.Generator, pitch_std: float = 0.15, yaw_std: float = 0.3,
                  fov_deg: float = 18.0) -> CameraPose:
    pitch = rng.normal(0.0, pitch_std) if pitch_std > 0 else 0.0
    yaw = rng.normal(0.0, yaw_std) if yaw_std > 0 else 0.0
    return pose_from_angles(pitch, yaw, fov_deg)


@dataclass
class RayImage:
    origins: np.ndarray  # (H, W, 3)
    directions: np.ndarray  # (H, W, 3), unit length
    near: float
    far: float


def rays_for_camera(pose: CameraPose, height: int, width: int, near: float, far: float) -> RayImage:
    """Pinhole rays through pixel centers; the field of view is vertical."""
    if height < 1 or width < 1:
        raise ValueError("image extents must be positive")
    if not 0 <= near < far:
        raise ValueError("ray bounds need 0 <= near < far")
    forward, right, up = pose.basis()
    half = np.tan(np.deg2rad(pose.fov_deg) / 2)
    xs = (2 * (np.arange(width) + 0.5) / width - 1) * half * (width / height)
    ys = (1 - 2 * (np.arange(height) + 0.5) / height) * half
    dirs = forward + xs[None, :, None] * right + ys[:, None, None] * up
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.position, dirs.shape).copy()
    return RayImage(origins, dirs, float(near), float(far))


def foreground_depths(near: float, far: float, count: int, shape: tuple[int, ...],
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Bin midpoints, or one uniform draw per bin when ``rng`` is given."""
    width = (far - near) / count
    offsets = np.full(shape + (count,), 0.5) if rng is None else rng.uniform(size=shape + (count,))
    return near + (np.arange(count) + offsets) * width


def background_depths(origins: np.ndarray, dirs: np.ndarray, count: int, far: float) -> np.ndarray:
    """Depths where each ray crosses spheres of radius 1/u, u evenly spaced in (0, 1)."""
    inv_r = (count - np.arange(count) - 0.5) / count  # decreasing: nearest sphere first
    radii = 1.0 / inv_r
    b = np.sum(origins * dirs, axis=-1, keepdims=True)
    c = np.sum(origins * origins, axis=-1, keepdims=True) - radii ** 2
    depths = -b + np.sqrt(np.maximum(b * b - c, 0.0))
    return np.maximum.accumulate(np.maximum(depths, far), axis=-1)


@dataclass
class Composite:
    feature: Tensor  # (..., D)
    weights: Tensor  # (..., S)
    depth: Tensor  # (...)
    alpha: Tensor  # (...), total opacity
    residual: Tensor  # (...), transmittance left after the last sample


def composite(density: Tensor, deltas: np.ndarray, features: Tensor, depths: np.ndarray) -> Composite:
    """Discrete quadrature along the last sample axis.

    alpha_j = 1 - exp(-sigma_j delta_j), T_j = exp(-sum_{k<j} sigma_k delta_k),
    weight_j = T_j alpha_j. Samples must already be ordered front to back.
    """
    if density.shape[-1] < 2:
        raise ValueError("compositing needs at least two samples per ray")
    tau = density * Tensor(deltas)
    acc = T.cumsum(tau, axis=-1)
    S = density.shape[-1]
    lead = density.shape[:-1]
    # exclusive sum taken directly: acc - tau cancels badly after a huge far delta
    before = T.concat([Tensor(np.zeros(lead + (1,))), T.getitem(acc, (Ellipsis, slice(0, S - 1)))], axis=-1)
    trans = T.exp(T.neg(before))
    alpha = 1.0 - T.exp(T.neg(tau))
    weights = trans * alpha
    feature = T.tsum(T.reshape(weights, lead + (S, 1)) * features, axis=-2)
    depth = T.tsum(weights * Tensor(depths), axis=-1)
    total = T.tsum(weights, axis=-1)
    residual = T.exp(T.neg(T.getitem(acc, (Ellipsis, S - 1))))
    return Composite(feature, weights, depth, total, residual)


class RayFeatureHead(Module):
    """Two modulated layers on [aggregated feature, Fourier features of the view direction]."""

    def __init__(self, rng: np.random.Generator, w_dim: int, feature_dim: int, hidden: int,
                 out_dim: int, dir_bands: int = 4, slope: float = T.LEAKY_SLOPE):
        self.l1 = ModulatedDense(rng, w_dim, feature_dim + 6 * dir_bands, hidden)
        self.l2 = ModulatedDense(rng, w_dim, hidden, out_dim)
        self.dir_bands, self.slope = dir_bands, slope

    def __call__(self, feature: Tensor, directions, w: Tensor) -> Tensor:
        """``feature`` (B,R,D_f), ``directions`` (B,R,3), ``w`` (B,D_w)."""
        h = T.concat([feature, positional_encode(directions, self.dir_bands)], axis=-1)
        h = T.leaky_relu(self.l1(h, w), self.slope)
        return self.l2(h, w)


class Upsampler(Module):
    """``direct``: per-pixel affine to RGB. ``up2x``: nearest x2, 3x3 conv, leaky ReLU, affine to RGB.

    Both end in a sigmoid so colors lie in (0, 1).
    """

    def __init__(self, rng: np.random.Generator, channels: int, mode: str = "up2x",
                 slope: float = T.LEAKY_SLOPE):
        if mode not in ("direct", "up2x"):
            raise ValueError(f"unknown upsample mode {mode!r}")
        self.conv = Conv2d(rng, channels, channels, 3, padding=1) if mode == "up2x" else None
        self.to_rgb = Dense(rng, channels, 3)
        self.mode, self.slope = mode, slope

    def __call__(self, feat: Tensor) -> Tensor:
        """(B,H,W,C) -> (B,H',W',3)."""
        if self.mode == "direct":
            return self.rgb(feat)
        h = T.leaky_relu(self.conv(T.upsample_nearest2x(feat)), self.slope)
        return self.rgb(h)

    def rgb(self, feat: Tensor) -> Tensor:
        return T.sigmoid(self.to_rgb(feat))

    @property
    def factor(self) -> int:
        return 2 if self.mode == "up2x" else 1
