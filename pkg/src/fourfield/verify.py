"""Invariant battery shared by ``fourfield verify`` and the test suite.

Each check returns a :class:`Check` with the measured quantity and the bound it
was held to, so the CLI can print one table row per check.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import decode, encode
from .config import TrainConfig
from .discriminators import Discriminator, image_discriminator, time_discriminator
from .generator import Generator
from .latents import ContentMapping, MotionGenerator, sample_unit_sphere
from .fields import BackgroundField, ForegroundField
from .render import (RayFeatureHead, Upsampler, composite, pose_from_angles, rays_for_camera,
                     sample_camera)
from .tensor import Tensor
from .training import AdamHyper, OptimizerState, adam_step, init_state, r1_penalty, to_checkpoint


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""
    seconds: float = 0.0


def _projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    """A fixed random linear functional of ``out``, so every output coordinate matters."""
    return T.tsum(out * Tensor(rng.normal(size=out.shape)))


def grad_check_module(module, call: Callable[[], Tensor], inputs=(), max_coords: int = 12,
                      seed: int = 0) -> T.GradCheckResult:
    """Grad-check ``call`` over every parameter of ``module`` plus differentiable ``inputs``."""
    params = list(module.parameters().values()) + list(inputs)
    proj_seed = seed + 1

    def f(*_):
        return _projected(call(), np.random.default_rng(proj_seed))

    return T.grad_check(f, params, eps=1e-4, max_coords=max_coords, seed=seed)


def small_config(feature_res: int = 4, samples: int = 4) -> TrainConfig:
    """Reduced widths for gradient checks; same topology as the desk defaults."""
    cfg = TrainConfig()
    d = cfg.dims
    d.z_dim = d.m_dim = d.w_dim = 8
    d.mapping_layers, d.motion_hidden, d.n_dim = 3, 8, 6
    d.fg_layers, d.fg_hidden, d.feature_dim = 3, 8, 6
    d.bg_layers, d.bg_hidden = 2, 6
    d.pe_bands, d.dir_bands, d.time_bands = 3, 2, 2
    d.head_hidden, d.image_channels = 6, 4
    d.disc_channels = (4, 6)
    cfg.render.resolution = feature_res * 2
    cfg.render.samples = samples
    cfg.validate()
    return cfg


def network_grad_checks(seed: int = 0, max_coords: int = 12) -> dict[str, float]:
    """Max relative gradient error for every network at reduced widths."""
    cfg = small_config()
    d = cfg.dims
    rng = np.random.default_rng(seed)
    B, N = 2, 5
    z = Tensor(sample_unit_sphere(d.z_dim, rng, B))
    m = Tensor(sample_unit_sphere(d.m_dim, rng, B))
    w = Tensor(rng.normal(size=(B, d.w_dim)))
    n = Tensor(rng.normal(size=(B, d.n_dim)))
    x = Tensor(rng.uniform(-1, 1, (B, N, 3)))
    dirs = rng.normal(size=(B, N, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    x4 = np.concatenate([dirs, rng.uniform(0.2, 1.0, (B, N, 1))], axis=-1)
    feat = Tensor(rng.normal(size=(B, N, d.feature_dim)))
    img = Tensor(rng.normal(size=(B, 4, 4, d.image_channels)))
    t = np.array([0.3, 0.8])
    errors = {}

    mapping = ContentMapping(rng, d.z_dim, d.w_dim, d.mapping_layers)
    errors["mapping"] = grad_check_module(mapping, lambda: mapping(z), [z], max_coords, seed).max_error
    for mode in ("multiply", "concat", "positional"):
        motion = MotionGenerator(rng, d.m_dim, d.motion_hidden, d.n_dim, mode, d.time_bands)
        errors[f"motion[{mode}]"] = grad_check_module(
            motion, lambda: motion(m, t), [m], max_coords, seed).max_error
    fg = ForegroundField(rng, d.w_dim, d.n_dim, d.fg_layers, d.fg_hidden, d.feature_dim, d.pe_bands)

    def fg_out():
        s = fg(x, w, n)
        return T.concat([s.feature, s.density], axis=-1)
    errors["foreground"] = grad_check_module(fg, fg_out, [x, w, n], max_coords, seed).max_error
    bg = BackgroundField(rng, d.w_dim, d.bg_layers, d.bg_hidden, d.feature_dim, d.pe_bands)

    def bg_out():
        s = bg(x4, w)
        return T.concat([s.feature, s.density], axis=-1)
    errors["background"] = grad_check_module(bg, bg_out, [w], max_coords, seed).max_error
    head = RayFeatureHead(rng, d.w_dim, d.feature_dim, d.head_hidden, d.image_channels, d.dir_bands)
    errors["ray_head"] = grad_check_module(head, lambda: head(feat, dirs, w), [feat, w],
                                           max_coords, seed).max_error
    up = Upsampler(rng, d.image_channels, "up2x")
    errors["upsampler"] = grad_check_module(up, lambda: up(img), [img], max_coords, seed).max_error
    pair = Tensor(rng.uniform(size=(B, 8, 8, 7)))
    frame = Tensor(rng.uniform(size=(B, 8, 8, 3)))
    dt = time_discriminator(rng, d.disc_channels)
    di = image_discriminator(rng, d.disc_channels)
    errors["d_time"] = grad_check_module(dt, lambda: dt(pair), [pair], max_coords, seed).max_error
    errors["d_image"] = grad_check_module(di, lambda: di(frame), [frame], max_coords, seed).max_error
    return errors


def render_grad_check(seed: int = 0, max_coords: int = 6) -> float:
    """End-to-end: projected 4x4 render (S=4) against every generator parameter."""
    cfg = small_config(feature_res=4, samples=4)
    cfg.render.upsample = "direct"
    cfg.render.resolution = 4
    cfg.validate()
    rng = np.random.default_rng(seed)
    gen = Generator(cfg, rng)
    d = cfg.dims
    z = sample_unit_sphere(d.z_dim, rng, 1)
    m = sample_unit_sphere(d.m_dim, rng, 1)
    pose = [pose_from_angles(0.1, -0.2, cfg.render.fov_deg)]
    return grad_check_module(gen, lambda: gen.render(pose, [0.6], z, m).rgb,
                             (), max_coords, seed).max_error


def conservation_error(n_rays: int = 10_000, samples: int = 24, seed: int = 0) -> float:
    """max |sum(weights) + residual - 1| over random densities and spacings."""
    rng = np.random.default_rng(seed)
    dens = Tensor(rng.exponential(2.0, (n_rays, samples)) * (rng.uniform(size=(n_rays, 1)) < 0.9))
    deltas = rng.uniform(0.001, 0.3, (n_rays, samples))
    depths = np.cumsum(deltas, axis=-1)
    with T.no_grad():
        c = composite(dens, deltas, Tensor(np.zeros((n_rays, samples, 1))), depths)
    return float(np.max(np.abs(c.weights.data.sum(-1) + c.residual.data - 1.0)))


def constant_density_error(c: float, samples: int = 256) -> float:
    """Opacity of a unit-length ray with constant density c against 1 - exp(-c)."""
    deltas = np.full((1, samples), 1.0 / samples)
    with T.no_grad():
        out = composite(Tensor(np.full((1, samples), c)), deltas, Tensor(np.zeros((1, samples, 1))),
                        np.cumsum(deltas, axis=-1))
    return abs(float(out.alpha.data[0]) - (1.0 - math.exp(-c)))


def time_zero_spread(n: int = 100, seed: int = 0, mode: str = "multiply") -> float:
    """Largest elementwise gap between motion vectors at t = 0 over ``n`` motion codes."""
    cfg = TrainConfig()
    rng = np.random.default_rng(seed)
    d = cfg.dims
    motion = MotionGenerator(rng, d.m_dim, d.motion_hidden, d.n_dim, mode, d.time_bands)
    with T.no_grad():
        out = motion(sample_unit_sphere(d.m_dim, rng, n), np.zeros(n)).data
    return float(np.max(np.abs(out - out[0])))


def static_frames(gen: Generator, times, seed: int = 0, static: bool = True) -> np.ndarray:
    cfg = gen.cfg
    rng = np.random.default_rng(seed)
    z = sample_unit_sphere(cfg.dims.z_dim, rng, 1)
    m = sample_unit_sphere(cfg.dims.m_dim, rng, 1)
    pose = sample_camera(rng, cfg.render.pitch_std, cfg.render.yaw_std, cfg.render.fov_deg)
    with T.no_grad():
        return np.stack([gen.render([pose], [t], z, m, static).rgb.data[0] for t in times])


def linear_r1_error(seed: int = 0) -> float:
    """R1 of score = sum(a * pixels) against 0.5 * |a|^2."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(4, 4, 3))
    x = rng.uniform(size=(5, 4, 4, 3))
    pen = r1_penalty(lambda v: T.tsum(v * Tensor(a), axis=(1, 2, 3)), [x])
    return abs(pen.item() - 0.5 * float(np.sum(a * a)))


def r1_weight_grad_error(seed: int = 0) -> float:
    """Weight gradient of R1 on a two-layer conv discriminator at 4x4 against finite differences."""
    rng = np.random.default_rng(seed)
    disc = Discriminator(rng, 3, (4,))
    x = rng.uniform(size=(3, 4, 4, 3))
    params = list(disc.parameters().values())

    def f(*_):
        return r1_penalty(disc, [x])
    return T.grad_check(f, params, eps=1e-4).max_error


def adam_single_step_error() -> float:
    """One Adam step on a scalar against the hand-expanded update."""
    hyper = AdamHyper()
    x0, g = 0.7, 0.3
    p = {"x": Tensor(np.array([x0]))}
    state = OptimizerState.for_params(p)
    adam_step(p, {"x": np.array([g])}, state, hyper)
    m_hat = (1 - hyper.beta1) * g / (1 - hyper.beta1)
    v_hat = (1 - hyper.beta2) * g * g / (1 - hyper.beta2)
    expected = x0 - hyper.lr * m_hat / (math.sqrt(v_hat) + hyper.eps)
    return abs(float(p["x"].data[0]) - expected) / abs(expected)


def quadratic_bowl(x0: float = 1.0, lr: float = 0.1, steps: int = 100) -> float:
    hyper = AdamHyper(lr=lr)
    p = {"x": Tensor(np.array([x0]))}
    state = OptimizerState.for_params(p)
    for _ in range(steps):
        adam_step(p, {"x": 2.0 * p["x"].data}, state, hyper)
    return abs(float(p["x"].data[0]))


def checkpoint_roundtrip_identical(seed: int = 0) -> bool:
    cfg = small_config()
    cfg.train.seed = seed
    blob = encode(to_checkpoint(init_state(cfg)))
    return encode(decode(blob)) == blob


def camera_std_error(n: int = 100_000, seed: int = 0, pitch_std: float = 0.15,
                     yaw_std: float = 0.3) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    poses = [sample_camera(rng, pitch_std, yaw_std) for _ in range(n)]
    pitch = np.array([p.pitch for p in poses])
    yaw = np.array([p.yaw for p in poses])
    return abs(pitch.std() / pitch_std - 1), abs(yaw.std() / yaw_std - 1)


def center_ray_error(seed: int = 0, res: int = 9) -> float:
    """Distance between the origin and the central pixel's ray, over random poses."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(20):
        pose = sample_camera(rng, 0.15, 0.3)
        rays = rays_for_camera(pose, res, res, 0.5, 2.0)
        o, d = rays.origins[res // 2, res // 2], rays.directions[res // 2, res // 2]
        worst = max(worst, float(np.linalg.norm(np.cross(-o, d))))
    return worst


def _timed(name: str, fn: Callable[[], tuple[bool, float, float, str]]) -> Check:
    start = time.perf_counter()
    try:
        passed, value, bound, detail = fn()
    except Exception as exc:  # a crashing check is a failing check
        passed, value, bound, detail = False, float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"
    return Check(name, bool(passed), float(value), float(bound), detail, time.perf_counter() - start)


def run_battery(seed: int = 0, negative: bool = False) -> list[Check]:
    """All invariant checks. ``negative`` corrupts the constant-density oracle on purpose."""
    checks = []

    def nets():
        errs = network_grad_checks(seed)
        worst = max(errs, key=errs.get)
        return errs[worst] < 1e-4, errs[worst], 1e-4, f"worst: {worst}"
    checks.append(_timed("grad_check networks", nets))

    def e2e():
        err = render_grad_check(seed)
        return err < 1e-3, err, 1e-3, "4x4, S=4"
    checks.append(_timed("grad_check render", e2e))

    def cons():
        err = conservation_error(seed=seed)
        return err < 1e-9, err, 1e-9, "1e4 rays"
    checks.append(_timed("weights + residual = 1", cons))

    def closed():
        shift = 0.05 if negative else 0.0
        errs = [constant_density_error(c) + shift for c in (0.5, 2.0, 8.0)]
        return max(errs) < 1e-3, max(errs), 1e-3, "S=256" + (" (fault injected)" if negative else "")
    checks.append(_timed("constant density opacity", closed))

    def tzero():
        spread = time_zero_spread(seed=seed)
        return spread == 0.0, spread, 0.0, "100 codes, multiplicative time"
    checks.append(_timed("motion vector at t=0", tzero))

    def static():
        cfg = TrainConfig()
        cfg.render.resolution = 8
        gen = Generator(cfg, np.random.default_rng(seed))
        frames = static_frames(gen, np.linspace(0, 1, 8), seed)
        gap = float(np.max(np.abs(frames - frames[0])))
        return gap == 0.0, gap, 0.0, "8 times"
    checks.append(_timed("static mode is time-free", static))

    def r1lin():
        err = linear_r1_error(seed)
        return err < 1e-10, err, 1e-10, "linear disc"
    checks.append(_timed("R1 closed form", r1lin))

    def r1fd():
        err = r1_weight_grad_error(seed)
        return err < 1e-3, err, 1e-3, "2-layer, 4x4"
    checks.append(_timed("R1 weight gradient", r1fd))

    def adam1():
        err = adam_single_step_error()
        return err <= 1e-15, err, 1e-15, "scalar"
    checks.append(_timed("Adam single step", adam1))

    def bowl():
        x = quadratic_bowl()
        return x < 1e-2, x, 1e-2, "x0=1, lr=0.1, 100 steps"
    checks.append(_timed("Adam quadratic bowl", bowl))

    def ckpt():
        ok = checkpoint_roundtrip_identical(seed)
        return ok, 0.0 if ok else 1.0, 0.0, "encode/decode/encode"
    checks.append(_timed("checkpoint byte identity", ckpt))

    def cams():
        ep, ey = camera_std_error(seed=seed)
        return max(ep, ey) < 0.03, max(ep, ey), 0.03, f"pitch {ep:.4f}, yaw {ey:.4f}"
    checks.append(_timed("camera angle spread", cams))

    def center():
        err = center_ray_error(seed)
        return err < 1e-9, err, 1e-9, "odd resolution"
    checks.append(_timed("center ray hits origin", center))
    return checks


def format_table(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{'check':<{width}}  result  {'value':>11}  {'bound':>9}  seconds  detail"]
    for c in checks:
        lines.append(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL':<6}  {c.value:>11.3e}  "
                     f"{c.bound:>9.1e}  {c.seconds:>7.2f}  {c.detail}")
    return "\n".join(lines)
