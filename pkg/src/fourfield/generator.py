"""The full frame generator: latents -> fields -> rays -> composite -> image."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .fields import BackgroundField, ForegroundField, inverse_sphere_param
from .latents import ContentMapping, MotionGenerator
from .nn import Module
from .render import (FAR_DELTA, CameraPose, RayFeatureHead, Upsampler, background_depths,
                     composite, foreground_depths, rays_for_camera)
from .tensor import Tensor


@dataclass
class RenderOutput:
    rgb: Tensor  # (B, H, W, 3)
    features: Tensor  # (B, h, w, C) low-resolution image features
    depth: np.ndarray  # (B, h, w)
    alpha: np.ndarray  # (B, h, w)


class Generator(Module):
    def __init__(self, cfg: TrainConfig, rng: np.random.Generator):
        d, m = cfg.dims, cfg.model
        self.mapping = ContentMapping(rng, d.z_dim, d.w_dim, d.mapping_layers, m.leaky_slope)
        self.motion = MotionGenerator(rng, d.m_dim, d.motion_hidden, d.n_dim, m.motion_mode,
                                      d.time_bands, m.leaky_slope)
        self.fg = ForegroundField(rng, d.w_dim, d.n_dim, d.fg_layers, d.fg_hidden, d.feature_dim,
                                  d.pe_bands, m.leaky_slope, m.density_activation)
        self.bg = (BackgroundField(rng, d.w_dim, d.bg_layers, d.bg_hidden, d.feature_dim,
                                   d.pe_bands, m.leaky_slope, m.density_activation)
                   if m.background else None)
        self.head = RayFeatureHead(rng, d.w_dim, d.feature_dim, d.head_hidden, d.image_channels,
                                   d.dir_bands, m.leaky_slope)
        self.up = Upsampler(rng, d.image_channels, cfg.render.upsample, m.leaky_slope)
        self.cfg = cfg

    def named_parameters(self, prefix: str = ""):
        for name in ("mapping", "motion", "fg", "bg", "head", "up"):
            part = getattr(self, name)
            if part is not None:
                yield from part.named_parameters(f"{prefix}{name}.")

    def motion_vector(self, m, t, static: bool = False) -> Tensor:
        m = T.as_tensor(m)
        if static:
            return Tensor(np.zeros((m.shape[0], self.cfg.dims.n_dim)))
        return self.motion(m, t)

    def render(self, poses: Sequence[CameraPose], t, z, m, static: bool = False,
               rng: np.random.Generator | None = None) -> RenderOutput:
        """Render one frame per batch item.

        ``t`` (B,), ``z`` (B,D_z), ``m`` (B,D_m). ``static`` replaces the motion
        vector by zeros. ``rng`` switches depth sampling from bin midpoints to
        stratified jitter.
        """
        rc = self.cfg.render
        B = len(poses)
        res = rc.feature_resolution
        t = np.broadcast_to(np.asarray(t, dtype=float).reshape(-1), (B,))
        w = self.mapping(z)
        n = self.motion_vector(m, t, static)

        rays = [rays_for_camera(p, res, res, rc.near, rc.far) for p in poses]
        R = res * res
        origins = np.stack([r.origins.reshape(R, 3) for r in rays])
        dirs = np.stack([r.directions.reshape(R, 3) for r in rays])
        S = rc.samples
        fg_l = foreground_depths(rc.near, rc.far, S, (B, R), rng)
        pts = origins[:, :, None, :] + fg_l[..., None] * dirs[:, :, None, :]
        fg = self.fg(pts.reshape(B, R * S, 3), w, n)
        dens = [T.reshape(fg.density, (B, R, S))]
        feats = [T.reshape(fg.feature, (B, R, S, -1))]
        depths = [fg_l]
        deltas = [np.full((B, R, S), (rc.far - rc.near) / S)]
        if self.bg is not None:
            K = rc.bg_samples
            bg_l = background_depths(origins[:, :, None, :], dirs[:, :, None, :], K, rc.far)
            bg_l = bg_l.reshape(B, R, K)
            bpts = origins[:, :, None, :] + bg_l[..., None] * dirs[:, :, None, :]
            bg = self.bg(inverse_sphere_param(bpts).reshape(B, R * K, 4), w)
            dens.append(T.reshape(bg.density, (B, R, K)))
            feats.append(T.reshape(bg.feature, (B, R, K, -1)))
            depths.append(bg_l)
            gaps = np.diff(bg_l, axis=-1)
            deltas.append(np.concatenate([gaps, np.full((B, R, 1), FAR_DELTA)], axis=-1))
        comp = composite(T.concat(dens, axis=-1), np.concatenate(deltas, axis=-1),
                         T.concat(feats, axis=-2), np.concatenate(depths, axis=-1))
        pix = self.head(comp.feature, dirs, w)
        features = T.reshape(pix, (B, res, res, -1))
        return RenderOutput(self.up(features), features,
                            comp.depth.data.reshape(B, res, res), comp.alpha.data.reshape(B, res, res))

    def __call__(self, poses, t, z, m, static: bool = False, rng=None) -> Tensor:
        return self.render(poses, t, z, m, static, rng).rgb


def render_frame(gen: Generator, pose: CameraPose, t: float, z: np.ndarray, m: np.ndarray,
                 static: bool = False) -> np.ndarray:
    """Evaluation render of a single (H, W, 3) frame."""
    with T.no_grad():
        out = gen.render([pose], [t], np.asarray(z)[None], np.asarray(m)[None], static)
    return out.rgb.data[0]


def path_consistency(gen: Generator, features: Tensor, count: int,
                     rng: np.random.Generator, rgb: Tensor | None = None) -> Tensor:
    """Mean squared RGB gap between upsampled output pixels and the direct per-pixel
    map of the low-resolution feature they came from, over ``count`` random pixels."""
    B, h, w, _ = features.shape
    f = gen.up.factor
    b = rng.integers(0, B, count)
    ys = rng.integers(0, h * f, count)
    xs = rng.integers(0, w * f, count)
    if rgb is None:
        rgb = gen.up(features)
    hi = T.getitem(rgb, (b, ys, xs))
    lo = gen.up.rgb(T.getitem(features, (b, ys // f, xs // f)))
    diff = hi - lo
    return T.mean(T.tsum(diff * diff, axis=-1))
