"""Pair (time-aware) and single-frame discriminators, plus the reduced augmentation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Conv2d, Dense, Module
from .tensor import Tensor

AUGMENTATIONS = ("flip", "brightness", "none")
BRIGHTNESS_RANGE = 0.1


@dataclass
class FramePair:
    frame_a: np.ndarray | Tensor  # (B, H, W, 3) at t1
    frame_b: np.ndarray | Tensor  # (B, H, W, 3) at t2
    dt: np.ndarray  # (B,), t2 - t1 > 0


def pair_to_input(frame_a, frame_b, dt) -> Tensor:
    """Stack [frame at t1 | frame at t2 | dt repeated over the image] into 7 channels."""
    a, b = T.as_tensor(frame_a), T.as_tensor(frame_b)
    if a.shape != b.shape:
        raise T.ShapeError(f"pair frames differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = T.reshape(a, (1,) + a.shape), T.reshape(b, (1,) + b.shape)
    B, H, W, _ = a.shape
    dt = np.broadcast_to(np.asarray(dt, dtype=float).reshape(-1), (B,))
    if np.any(dt <= 0):
        raise ValueError("pair time difference must be positive (t2 > t1)")
    chan = Tensor(np.broadcast_to(dt[:, None, None, None], (B, H, W, 1)).copy())
    return T.concat([a, b, chan], axis=-1)


def deteriorated_input(frames) -> Tensor:
    """A single frame shaped as a pair for the time discriminator: [I | I | 0]."""
    f = T.as_tensor(frames)
    zero = Tensor(np.zeros(f.shape[:-1] + (1,)))
    return T.concat([f, f, zero], axis=-1)


class Discriminator(Module):
    """Strided 3x3 conv stack, leaky ReLU, global mean, affine to one logit per item."""

    def __init__(self, rng: np.random.Generator, in_channels: int,
                 channels: Sequence[int] = (16, 32, 64), slope: float = T.LEAKY_SLOPE):
        sizes = [in_channels] + list(channels)
        self.convs = [Conv2d(rng, a, b, 3, stride=2, padding=1) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out = Dense(rng, sizes[-1], 1)
        self.in_channels, self.slope = in_channels, slope

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.in_channels:
            raise T.ShapeError(f"discriminator expects {self.in_channels} channels, got {x.shape[-1]}")
        for conv in self.convs:
            x = T.leaky_relu(conv(x), self.slope)
        pooled = T.mean(x, axis=(1, 2))
        return T.reshape(self.out(pooled), (x.shape[0],))


def time_discriminator(rng, channels=(16, 32, 64), slope=T.LEAKY_SLOPE) -> Discriminator:
    return Discriminator(rng, 7, channels, slope)


def image_discriminator(rng, channels=(16, 32, 64), slope=T.LEAKY_SLOPE) -> Discriminator:
    return Discriminator(rng, 3, channels, slope)


@dataclass
class AugmentParams:
    flip: np.ndarray | None  # (B,) bool
    shift: np.ndarray | None  # (B, 3)


def draw_augment(rng: np.random.Generator, batch: int, policy: Sequence[str]) -> AugmentParams:
    """One set of augmentation draws, to be applied identically to real and generated batches."""
    bad = set(policy) - set(AUGMENTATIONS)
    if bad:
        raise ValueError(f"unknown augmentations {sorted(bad)}")
    flip = rng.uniform(size=batch) < 0.5 if "flip" in policy else None
    shift = (rng.uniform(-BRIGHTNESS_RANGE, BRIGHTNESS_RANGE, (batch, 3))
             if "brightness" in policy else None)
    return AugmentParams(flip, shift)


def diff_augment(batch, params: AugmentParams) -> Tensor:
    """Horizontal flip and per-channel brightness shift, differentiable in the pixels."""
    x = T.as_tensor(batch)
    if params.flip is not None:
        mask = params.flip.reshape(-1, 1, 1, 1)
        x = T.where_const(np.broadcast_to(mask, x.shape), T.flip(x, 2), x)
    if params.shift is not None:
        x = x + Tensor(params.shift[:, None, None, :])
    return x
