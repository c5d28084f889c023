"""Run configuration: nested dataclasses serialized as flat ``section.key=value`` text."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class Dims:
    z_dim: int = 64
    m_dim: int = 64
    w_dim: int = 64
    mapping_layers: int = 8
    motion_hidden: int = 64
    n_dim: int = 32
    fg_layers: int = 4
    fg_hidden: int = 64
    feature_dim: int = 32
    bg_layers: int = 4
    bg_hidden: int = 16
    pe_bands: int = 10
    dir_bands: int = 4
    time_bands: int = 4
    head_hidden: int = 32
    image_channels: int = 16
    disc_channels: tuple[int, ...] = (16, 32, 64)


@dataclass
class RenderConfig:
    resolution: int = 16
    upsample: str = "up2x"
    samples: int = 16
    bg_samples: int = 4
    near: float = 0.5
    far: float = 2.0
    fov_deg: float = 18.0
    pitch_std: float = 0.15
    yaw_std: float = 0.3
    frames: int = 16

    @property
    def feature_resolution(self) -> int:
        return self.resolution // 2 if self.upsample == "up2x" else self.resolution


@dataclass
class LossConfig:
    lambda_r1: float = 0.5
    lambda_path: float = 0.2
    r1_every: int = 4
    path_samples: int = 16


@dataclass
class OptConfig:
    lr: float = 0.0025
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8
    mapping_lr_scale: float = 0.01
    motion_lr_scale: float = 1.0


@dataclass
class ModelConfig:
    leaky_slope: float = 0.2
    density_activation: str = "softplus"
    motion_mode: str = "multiply"
    background: bool = True
    image_disc: str = "separate"


@dataclass
class TrainLoopConfig:
    batch: int = 8
    seed: int = 0
    augment: tuple[str, ...] = ("flip", "brightness")
    checkpoint_every: int = 0
    joint_ratio: float = 0.0


@dataclass
class TrainConfig:
    dims: Dims = field(default_factory=Dims)
    render: RenderConfig = field(default_factory=RenderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    opt: OptConfig = field(default_factory=OptConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainLoopConfig = field(default_factory=TrainLoopConfig)

    def validate(self) -> "TrainConfig":
        errors = []
        if self.loss.lambda_r1 < 0 or self.loss.lambda_path < 0:
            errors.append("loss weights must be non-negative")
        if not (0 <= self.opt.beta1 < 1 and 0 <= self.opt.beta2 < 1):
            errors.append("betas must lie in [0, 1)")
        if self.opt.lr <= 0:
            errors.append("opt.lr must be positive")
        if self.render.upsample not in ("direct", "up2x"):
            errors.append(f"unknown render.upsample {self.render.upsample!r}")
        if self.render.upsample == "up2x" and self.render.resolution % 2:
            errors.append("up2x needs an even resolution")
        if self.render.samples < 2:
            errors.append("render.samples must be at least 2")
        if not 0 < self.render.fov_deg < 120:
            errors.append("render.fov_deg must lie in (0, 120)")
        if self.render.near >= self.render.far:
            errors.append("render.near must be below render.far")
        if self.render.frames < 2:
            errors.append("render.frames must be at least 2")
        if self.model.motion_mode not in ("multiply", "concat", "positional"):
            errors.append(f"unknown model.motion_mode {self.model.motion_mode!r}")
        if self.model.image_disc not in ("separate", "none", "video_deterioration"):
            errors.append(f"unknown model.image_disc {self.model.image_disc!r}")
        if self.model.density_activation not in ("softplus", "relu"):
            errors.append(f"unknown model.density_activation {self.model.density_activation!r}")
        if self.loss.r1_every < 1 or self.loss.path_samples < 1:
            errors.append("loss.r1_every and loss.path_samples must be positive")
        if self.train.batch < 1:
            errors.append("train.batch must be positive")
        if not 0 <= self.train.joint_ratio <= 1:
            errors.append("train.joint_ratio must lie in [0, 1]")
        bad = set(self.train.augment) - {"flip", "brightness", "none"}
        if bad:
            errors.append(f"unknown augmentations {sorted(bad)}")
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        lines = []
        for section in dataclasses.fields(self):
            block = getattr(self, section.name)
            for f in dataclasses.fields(block):
                lines.append(f"{section.name}.{f.name}={_format(getattr(block, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg.validate()

    def set(self, key: str, value: str) -> None:
        section, _, name = key.partition(".")
        sections = {f.name for f in dataclasses.fields(self)}
        if section not in sections or not name:
            raise ConfigError(f"unknown config key {key!r}")
        block = getattr(self, section)
        types = {f.name: f for f in dataclasses.fields(block)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(block, name)
        try:
            setattr(block, name, _parse(value, current))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, like: Any) -> Any:
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if like and isinstance(like[0], int):
            return tuple(int(p) for p in parts)
        return tuple(parts)
    return text


ABLATIONS = {
    "no_image_disc": ("model.image_disc", "none"),
    "video_deterioration": ("model.image_disc", "video_deterioration"),
    "no_background": ("model.background", "false"),
    "time_concat": ("model.motion_mode", "concat"),
    "time_positional": ("model.motion_mode", "positional"),
}


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    key, value = ABLATIONS[name]
    cfg.set(key, value)
    return cfg


def published_config() -> TrainConfig:
    """Dimensions and batch size at the published scale (not CPU-tractable)."""
    cfg = TrainConfig()
    cfg.dims = Dims(z_dim=512, m_dim=512, w_dim=512, motion_hidden=512, n_dim=128,
                    fg_layers=8, fg_hidden=128, feature_dim=128, bg_layers=4, bg_hidden=64,
                    head_hidden=128, image_channels=64, disc_channels=(128, 256, 512))
    cfg.train.batch = 64
    return cfg
