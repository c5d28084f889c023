"""Adversarial objective, regularizers, Adam, the alternating training step and resume."""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, ShapeMismatchError, assign
from .config import TrainConfig
from .data import Corpus, pair_indices, sample_real_frames, sample_real_pairs
from .discriminators import (Discriminator, deteriorated_input, diff_augment, draw_augment,
                             image_discriminator, pair_to_input, time_discriminator)
from .generator import Generator, path_consistency
from .latents import sample_unit_sphere
from .render import sample_camera
from .tensor import Tensor


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- losses

def adv_loss_d(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Non-saturating discriminator loss: softplus(-real) + softplus(fake), batch means."""
    if real_scores.size == 0 or fake_scores.size == 0:
        raise ValueError("adversarial loss of an empty batch")
    return T.mean(T.softplus(T.neg(real_scores))) + T.mean(T.softplus(fake_scores))


def adv_loss_g(fake_scores: Tensor) -> Tensor:
    if fake_scores.size == 0:
        raise ValueError("adversarial loss of an empty batch")
    return T.mean(T.softplus(T.neg(fake_scores)))


def r1_penalty(score_fn: Callable[..., Tensor], real_inputs: Sequence) -> Tensor:
    """Half the batch-mean squared norm of d(score)/d(real pixels).

    The pixel gradient is built with its own graph, so differentiating the
    returned penalty reaches the discriminator weights through it.
    """
    leaves = []
    for x in real_inputs:
        if isinstance(x, Tensor) and x.parents:
            raise ValueError("R1 is defined on real samples, got a computed tensor")
        leaves.append(Tensor(np.array(x.data if isinstance(x, Tensor) else x), requires_grad=True))
    scores = score_fn(*leaves)
    grads = T.grad(T.tsum(scores), leaves, create_graph=True)
    B = leaves[0].shape[0]
    per_item = None
    for g in grads:
        sq = T.tsum(T.reshape(g * g, (B, -1)), axis=1)
        per_item = sq if per_item is None else per_item + sq
    return T.scale(T.mean(per_item), 0.5)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamHyper:
    lr: float = 0.0025
    beta1: float = 0.0
    beta2: float = 0.99
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor]) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()}, 0)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
              hyper: AdamHyper, lr_scale: Callable[[str], float] | None = None) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} / moments {state.m[name].shape} "
                             f"do not match parameter {p.shape}")
        m = state.m[name] = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = state.v[name] = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * (g * g)
        lr = hyper.lr * (lr_scale(name) if lr_scale else 1.0)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)


# ---------------------------------------------------------------- state

@dataclass
class StepMetrics:
    step: int
    mode: str
    d_time: float | None
    d_img: float | None
    g_time: float | None
    g_img: float | None
    r1: float
    r1_weight: float
    path_reg: float
    path_weight: float
    loss_d: float
    loss_g: float
    total: float
    acc_time: float | None
    acc_img: float | None
    wall_ms: float = 0.0

    COLUMNS = ("step", "mode", "d_time", "d_img", "g_time", "g_img", "r1", "r1_weight",
               "path_reg", "path_weight", "loss_d", "loss_g", "total", "acc_time", "acc_img", "wall_ms")

    def deterministic(self) -> tuple:
        """Everything except wall-clock time."""
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "wall_ms")

    @classmethod
    def header(cls) -> str:
        return "\t".join(cls.COLUMNS)

    def to_line(self) -> str:
        def fmt(v):
            if v is None:
                return "na"
            if isinstance(v, float):
                return repr(v)
            return str(v)
        return "\t".join(fmt(getattr(self, c)) for c in self.COLUMNS)

    @classmethod
    def from_line(cls, line: str) -> "StepMetrics":
        vals = line.rstrip("\n").split("\t")
        kw = {}
        for c, v in zip(cls.COLUMNS, vals):
            if c == "step":
                kw[c] = int(v)
            elif c == "mode":
                kw[c] = v
            else:
                kw[c] = None if v == "na" else float(v)
        return cls(**kw)


@dataclass
class TrainState:
    cfg: TrainConfig
    gen: Generator
    d_time: Discriminator
    d_image: Discriminator | None
    opt_g: OptimizerState
    opt_dt: OptimizerState
    opt_di: OptimizerState | None
    rng: np.random.Generator
    step: int = 0

    def networks(self) -> dict[str, dict[str, Tensor]]:
        nets = {"g": self.gen.parameters(), "dt": self.d_time.parameters()}
        if self.d_image is not None:
            nets["di"] = self.d_image.parameters()
        return nets

    def optimizers(self) -> dict[str, OptimizerState]:
        opts = {"g": self.opt_g, "dt": self.opt_dt}
        if self.opt_di is not None:
            opts["di"] = self.opt_di
        return opts


def init_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    init_seq, train_seq = np.random.SeedSequence(cfg.train.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    slope = cfg.model.leaky_slope
    gen = Generator(cfg, init_rng)
    d_time = time_discriminator(init_rng, cfg.dims.disc_channels, slope)
    d_image = (image_discriminator(init_rng, cfg.dims.disc_channels, slope)
               if cfg.model.image_disc == "separate" else None)
    return TrainState(cfg, gen, d_time, d_image,
                      OptimizerState.for_params(gen.parameters()),
                      OptimizerState.for_params(d_time.parameters()),
                      OptimizerState.for_params(d_image.parameters()) if d_image else None,
                      np.random.default_rng(train_seq))


def generator_lr_scale(cfg: TrainConfig) -> Callable[[str], float]:
    def scale(name: str) -> float:
        if name.startswith("mapping."):
            return cfg.opt.mapping_lr_scale
        if name.startswith("motion."):
            return cfg.opt.motion_lr_scale
        return 1.0
    return scale


def _hyper(cfg: TrainConfig) -> AdamHyper:
    return AdamHyper(cfg.opt.lr, cfg.opt.beta1, cfg.opt.beta2, cfg.opt.eps)


def _update(params: dict[str, Tensor], loss: Tensor, opt: OptimizerState, cfg: TrainConfig,
            lr_scale=None) -> None:
    names = list(params)
    gs = T.grad(loss, [params[n] for n in names])
    adam_step(params, {n: g.data for n, g in zip(names, gs)}, opt, _hyper(cfg), lr_scale)


@contextlib.contextmanager
def _guard(name: str):
    """Turn a non-finite intermediate into a TrainingError naming the component."""
    try:
        yield
    except T.NonFiniteError as exc:
        raise TrainingError(f"non-finite value in {name}: {exc}") from exc


def _finite(name: str, value: Tensor) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise TrainingError(f"non-finite {name} loss at this step")
    return v


# ---------------------------------------------------------------- sampling fakes

@dataclass
class FakeBatch:
    poses: list
    z: np.ndarray
    m: np.ndarray
    t1: np.ndarray
    t2: np.ndarray


def sample_fake_pairs(cfg: TrainConfig, rng: np.random.Generator, n: int,
                      frames: int | None = None) -> FakeBatch:
    """Latents, one camera per pair, and two distinct clip times t1 < t2 on the frame grid."""
    rc, d = cfg.render, cfg.dims
    frames = frames or rc.frames
    z = sample_unit_sphere(d.z_dim, rng, n)
    m = sample_unit_sphere(d.m_dim, rng, n)
    poses = [sample_camera(rng, rc.pitch_std, rc.yaw_std, rc.fov_deg) for _ in range(n)]
    i, j = pair_indices(frames, rng, n)
    return FakeBatch(poses, z, m, i / (frames - 1), j / (frames - 1))


def render_pairs(gen: Generator, fb: FakeBatch, rng, static: bool = False):
    n = len(fb.poses)
    out = gen.render(fb.poses + fb.poses, np.concatenate([fb.t1, fb.t2]),
                     np.concatenate([fb.z, fb.z]), np.concatenate([fb.m, fb.m]), static, rng)
    a = T.getitem(out.rgb, slice(0, n))
    b = T.getitem(out.rgb, slice(n, 2 * n))
    return a, b, out


def image_scores(state: TrainState, frames) -> Tensor | None:
    kind = state.cfg.model.image_disc
    if kind == "separate":
        return state.d_image(frames)
    if kind == "video_deterioration":
        return state.d_time(deteriorated_input(frames))
    return None


def _accuracy(real: Tensor, fake: Tensor) -> float:
    return float(((real.data > 0).sum() + (fake.data < 0).sum()) / (real.size + fake.size))


def _d_params(state: TrainState) -> dict[str, Tensor]:
    params = {f"dt.{k}": v for k, v in state.d_time.parameters().items()}
    if state.d_image is not None:
        params.update({f"di.{k}": v for k, v in state.d_image.parameters().items()})
    return params


def _d_update(state: TrainState, loss_d: Tensor) -> None:
    cfg = state.cfg
    dt = state.d_time.parameters()
    di = state.d_image.parameters() if state.d_image is not None else {}
    names = [("dt", k) for k in dt] + [("di", k) for k in di]
    tensors = [dt[k] if g == "dt" else di[k] for g, k in names]
    gs = T.grad(loss_d, tensors)
    gdt = {k: g.data for (grp, k), g in zip(names, gs) if grp == "dt"}
    gdi = {k: g.data for (grp, k), g in zip(names, gs) if grp == "di"}
    adam_step(dt, gdt, state.opt_dt, _hyper(cfg))
    if di:
        adam_step(di, gdi, state.opt_di, _hyper(cfg))


# ---------------------------------------------------------------- steps

def train_step(state: TrainState, corpus: Corpus) -> StepMetrics:
    """One discriminator update followed by one generator update on video pairs."""
    start = time.perf_counter()
    cfg, rng = state.cfg, state.rng
    B, policy = cfg.train.batch, cfg.train.augment
    lam1, lam2, k = cfg.loss.lambda_r1, cfg.loss.lambda_path, cfg.loss.r1_every
    if corpus.clips < 1:
        raise TrainingError("corpus is empty")

    # discriminator phase
    real = sample_real_pairs(corpus, rng, B)
    fb = sample_fake_pairs(cfg, rng, B, corpus.frames)
    with T.no_grad(), _guard("generator"):
        fake_a, fake_b, _ = render_pairs(state.gen, fb, rng)
    aug = draw_augment(rng, B, policy)
    ra, rb = diff_augment(real.frame_a, aug), diff_augment(real.frame_b, aug)
    fa, fbb = diff_augment(fake_a.data, aug), diff_augment(fake_b.data, aug)
    with _guard("D_time"):
        s_real = state.d_time(pair_to_input(ra, rb, real.dt))
        s_fake = state.d_time(pair_to_input(fa, fbb, fb.t2 - fb.t1))
        d_time = adv_loss_d(s_real, s_fake)
    acc_time = _accuracy(s_real, s_fake)
    with _guard("D_image"):
        si_real, si_fake = image_scores(state, ra), image_scores(state, fa)
        d_img = adv_loss_d(si_real, si_fake) if si_real is not None else None
    acc_img = _accuracy(si_real, si_fake) if si_real is not None else None

    r1_val, r1_w = 0.0, 0.0
    loss_d = d_time if d_img is None else d_time + d_img
    if lam1 > 0 and state.step % k == 0:
        with _guard("R1"):
            r1 = r1_penalty(lambda a, b: state.d_time(pair_to_input(a, b, real.dt)), [ra, rb])
            if si_real is not None:
                r1 = r1 + r1_penalty(lambda x: image_scores(state, x), [ra])
        r1_val, r1_w = _finite("R1", r1), lam1 * k
        loss_d = loss_d + T.scale(r1, r1_w)
    d_time_v = _finite("D_time", d_time)
    d_img_v = _finite("D_image", d_img) if d_img is not None else None
    loss_d_v = _finite("discriminator", loss_d)
    with _guard("discriminator backward"):
        _d_update(state, loss_d)

    # generator phase
    fb = sample_fake_pairs(cfg, rng, B, corpus.frames)
    with _guard("generator"):
        fake_a, fake_b, out = render_pairs(state.gen, fb, rng)
    aug = draw_augment(rng, B, policy)
    fa, fbb = diff_augment(fake_a, aug), diff_augment(fake_b, aug)
    with _guard("G_time"):
        g_time = adv_loss_g(state.d_time(pair_to_input(fa, fbb, fb.t2 - fb.t1)))
    with _guard("G_image"):
        s_img = image_scores(state, fa)
        g_img = adv_loss_g(s_img) if s_img is not None else None
    loss_g = g_time if g_img is None else g_time + g_img
    path_v, path_w = 0.0, 0.0
    if lam2 > 0:
        with _guard("NeRF-path"):
            path = path_consistency(state.gen, out.features, cfg.loss.path_samples, rng, out.rgb)
        path_v, path_w = _finite("NeRF-path", path), lam2
        loss_g = loss_g + T.scale(path, lam2)
    g_time_v = _finite("G_time", g_time)
    g_img_v = _finite("G_image", g_img) if g_img is not None else None
    loss_g_v = _finite("generator", loss_g)
    with _guard("generator backward"):
        _update(state.gen.parameters(), loss_g, state.opt_g, cfg, generator_lr_scale(cfg))

    state.step += 1
    return StepMetrics(state.step, "video", d_time_v, d_img_v, g_time_v, g_img_v, r1_val, r1_w,
                       path_v, path_w, loss_d_v, loss_g_v, loss_d_v + loss_g_v, acc_time, acc_img,
                       (time.perf_counter() - start) * 1e3)


def image_step(state: TrainState, image_corpus: Corpus) -> StepMetrics:
    """Static-mode step: motion vector zeroed, only the image discriminator trains."""
    start = time.perf_counter()
    cfg, rng = state.cfg, state.rng
    if cfg.model.image_disc == "none":
        raise TrainingError("image-only steps need an image discriminator")
    B, policy = cfg.train.batch, cfg.train.augment
    lam1, lam2, k = cfg.loss.lambda_r1, cfg.loss.lambda_path, cfg.loss.r1_every

    real = sample_real_frames(image_corpus, rng, B)
    fb = sample_fake_pairs(cfg, rng, B)
    with T.no_grad(), _guard("generator"):
        fake = state.gen.render(fb.poses, np.zeros(B), fb.z, fb.m, static=True, rng=rng).rgb
    aug = draw_augment(rng, B, policy)
    r, f = diff_augment(real, aug), diff_augment(fake.data, aug)
    with _guard("D_image"):
        s_real, s_fake = image_scores(state, r), image_scores(state, f)
        d_img = adv_loss_d(s_real, s_fake)
    acc_img = _accuracy(s_real, s_fake)
    loss_d = d_img
    r1_val, r1_w = 0.0, 0.0
    if lam1 > 0 and state.step % k == 0:
        with _guard("R1"):
            r1 = r1_penalty(lambda x: image_scores(state, x), [r])
        r1_val, r1_w = _finite("R1", r1), lam1 * k
        loss_d = loss_d + T.scale(r1, r1_w)
    d_img_v, loss_d_v = _finite("D_image", d_img), _finite("discriminator", loss_d)
    if cfg.model.image_disc == "separate":
        _update(state.d_image.parameters(), loss_d, state.opt_di, cfg)
    else:
        _update(state.d_time.parameters(), loss_d, state.opt_dt, cfg)

    fb = sample_fake_pairs(cfg, rng, B)
    with _guard("generator"):
        out = state.gen.render(fb.poses, np.zeros(B), fb.z, fb.m, static=True, rng=rng)
    aug = draw_augment(rng, B, policy)
    with _guard("G_image"):
        g_img = adv_loss_g(image_scores(state, diff_augment(out.rgb, aug)))
    loss_g = g_img
    path_v, path_w = 0.0, 0.0
    if lam2 > 0:
        with _guard("NeRF-path"):
            path = path_consistency(state.gen, out.features, cfg.loss.path_samples, rng, out.rgb)
        path_v, path_w = _finite("NeRF-path", path), lam2
        loss_g = loss_g + T.scale(path, lam2)
    g_img_v, loss_g_v = _finite("G_image", g_img), _finite("generator", loss_g)
    # motion weights get no gradient through a zeroed motion vector; keep them out of the update
    params = {n: p for n, p in state.gen.parameters().items() if not n.startswith("motion.")}
    names = list(params)
    gs = T.grad(loss_g, [params[n] for n in names])
    grads = {n: g.data for n, g in zip(names, gs)}
    full = state.gen.parameters()
    for n in full:
        grads.setdefault(n, None)
    _masked_adam(full, grads, state.opt_g, _hyper(cfg), generator_lr_scale(cfg))

    state.step += 1
    return StepMetrics(state.step, "image", None, d_img_v, None, g_img_v, r1_val, r1_w,
                       path_v, path_w, loss_d_v, loss_g_v, loss_d_v + loss_g_v, None, acc_img,
                       (time.perf_counter() - start) * 1e3)


def _masked_adam(params, grads, state: OptimizerState, hyper: AdamHyper, lr_scale) -> None:
    """Adam over the parameters that have a gradient; frozen ones keep weights and moments."""
    live = {n: p for n, p in params.items() if grads[n] is not None}
    moments = OptimizerState({n: state.m[n] for n in live}, {n: state.v[n] for n in live}, state.step)
    adam_step(live, {n: grads[n] for n in live}, moments, hyper, lr_scale)
    state.m.update(moments.m)
    state.v.update(moments.v)
    state.step = moments.step


def is_image_step(step: int, ratio: float) -> bool:
    """Deterministic interleave: ``ratio`` of all steps are image steps."""
    return ratio > 0 and math.floor((step + 1) * ratio) > math.floor(step * ratio)


def train(state: TrainState, corpus: Corpus, steps: int, image_corpus: Corpus | None = None,
          joint_ratio: float | None = None, callback=None) -> list[StepMetrics]:
    """Run ``steps`` steps; with an image corpus, interleave static image steps at ``joint_ratio``."""
    ratio = state.cfg.train.joint_ratio if joint_ratio is None else joint_ratio
    history = []
    for _ in range(steps):
        if image_corpus is not None and is_image_step(state.step, ratio):
            metrics = image_step(state, image_corpus)
        else:
            metrics = train_step(state, corpus)
        history.append(metrics)
        if callback is not None:
            callback(state, metrics)
    return history


def pretrain_static(state: TrainState, image_corpus: Corpus, steps: int, callback=None) -> list[StepMetrics]:
    history = []
    for _ in range(steps):
        metrics = image_step(state, image_corpus)
        history.append(metrics)
        if callback is not None:
            callback(state, metrics)
    return history


# ---------------------------------------------------------------- persistence

def to_checkpoint(state: TrainState) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for net, params in state.networks().items():
        for name, p in params.items():
            tensors[f"{net}.{name}"] = p.data
    for net, opt in state.optimizers().items():
        tensors[f"opt.{net}.step"] = np.array([opt.step], dtype=np.int64)
        for name in opt.m:
            tensors[f"opt.{net}.m.{name}"] = opt.m[name]
            tensors[f"opt.{net}.v.{name}"] = opt.v[name]
    return Checkpoint(state.step, state.cfg.to_text(), state.rng.bit_generator.state, tensors)


def from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig | None = None) -> TrainState:
    """Rebuild a training state; ``cfg`` defaults to the embedded snapshot."""
    cfg = cfg or TrainConfig.from_text(ckpt.config_text)
    state = init_state(cfg)
    for net, params in state.networks().items():
        assign(params, ckpt.tensors, f"{net}.")
    for net, opt in state.optimizers().items():
        key = f"opt.{net}.step"
        if key not in ckpt.tensors:
            raise ShapeMismatchError(f"checkpoint lacks {key!r}")
        opt.step = int(ckpt.tensors[key][0])
        for name in opt.m:
            for which, store in (("m", opt.m), ("v", opt.v)):
                arr = ckpt.tensors.get(f"opt.{net}.{which}.{name}")
                if arr is None or arr.shape != store[name].shape:
                    raise ShapeMismatchError(f"optimizer moment {net}.{which}.{name} missing or misshapen")
                store[name] = np.array(arr, dtype=np.float64)
    state.rng.bit_generator.state = ckpt.rng_state
    state.step = ckpt.step
    return state


# ---------------------------------------------------------------- evaluation

def generated_brightness(state: TrainState, n: int, seed: int = 1234) -> np.ndarray:
    """Per-frame mean brightness of ``n`` evaluation renders (midpoint sampling)."""
    cfg = state.cfg
    rng = np.random.default_rng(seed)
    fb = sample_fake_pairs(cfg, rng, n)
    t = rng.uniform(size=n)
    out = []
    with T.no_grad():
        for s in range(0, n, 16):
            sl = slice(s, min(n, s + 16))
            rgb = state.gen.render(fb.poses[sl], t[sl], fb.z[sl], fb.m[sl]).rgb.data
            out.append(rgb.reshape(rgb.shape[0], -1).mean(axis=1))
    return np.concatenate(out)


def d_time_accuracy(state: TrainState, corpus: Corpus, n: int = 64, seed: int = 4321) -> float:
    """Held-out real/fake accuracy of the time discriminator (no augmentation)."""
    rng = np.random.default_rng(seed)
    real = sample_real_pairs(corpus, rng, n)
    fb = sample_fake_pairs(state.cfg, rng, n, corpus.frames)
    with T.no_grad():
        fa, fbb, _ = render_pairs(state.gen, fb, None)
        s_real = state.d_time(pair_to_input(real.frame_a, real.frame_b, real.dt))
        s_fake = state.d_time(pair_to_input(fa, fbb, fb.t2 - fb.t1))
    return _accuracy(s_real, s_fake)
