import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourfield import tensor as T
from fourfield.config import TrainConfig
from fourfield.data import frame_times
from fourfield.generator import Generator, render_frame
from fourfield.latents import sample_unit_sphere
from fourfield.render import (FAR_DELTA, RayFeatureHead, Upsampler, background_depths, composite,
                              foreground_depths, pose_from_angles, rays_for_camera, sample_camera)
from fourfield.tensor import Tensor
from fourfield.verify import conservation_error, constant_density_error, small_config


# ---------------------------------------------------------------- cameras

def test_zero_std_is_frontal():
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = sample_camera(rng, 0.0, 0.0)
        np.testing.assert_array_equal(p.position, [0.0, 0.0, 1.0])


def test_camera_determinism_and_unit_radius():
    a = [sample_camera(np.random.default_rng(4)).position for _ in range(1)]
    b = [sample_camera(np.random.default_rng(4)).position for _ in range(1)]
    assert a[0].tobytes() == b[0].tobytes()
    rng = np.random.default_rng(1)
    for _ in range(100):
        assert abs(np.linalg.norm(sample_camera(rng, 0.5, 1.0).position) - 1) < 1e-9


def test_fov_bounds():
    for fov in (0.0, 120.0, -5.0):
        with pytest.raises(ValueError):
            pose_from_angles(0.0, 0.0, fov)


def _rotation(pitch, yaw):
    cp, sp, cy, sy = math.cos(pitch), math.sin(pitch), math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cp, sp], [0, -sp, cp]])  # rotation by -pitch about x
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return ry @ rx


@settings(max_examples=30, deadline=None)
@given(pitch=st.floats(-1.2, 1.2), yaw=st.floats(-3.0, 3.0), h=st.integers(1, 6), w=st.integers(1, 6),
       fov=st.floats(5.0, 100.0))
def test_rays_match_rotated_pinhole(pitch, yaw, h, w, fov):
    pose = pose_from_angles(pitch, yaw, fov)
    rays = rays_for_camera(pose, h, w, 0.5, 2.0)
    tan = math.tan(math.radians(fov) / 2)
    R = _rotation(pitch, yaw)
    np.testing.assert_allclose(R @ np.array([0, 0, 1.0]), pose.position, atol=1e-12)
    for i in range(h):
        for j in range(w):
            cam = np.array([((j + 0.5) / w * 2 - 1) * tan * w / h, (1 - (i + 0.5) / h * 2) * tan, -1.0])
            ref = R @ (cam / np.linalg.norm(cam))
            np.testing.assert_allclose(rays.directions[i, j], ref, atol=1e-12)
    assert np.all(np.abs(np.linalg.norm(rays.directions, axis=-1) - 1) < 1e-9)


def test_corner_ray_angle():
    H, W, fov = 6, 10, 18.0
    pose = pose_from_angles(0.2, -0.4, fov)
    rays = rays_for_camera(pose, H, W, 0.5, 2.0)
    tan = math.tan(math.radians(fov) / 2)
    expected = math.atan(tan * math.hypot((W - 1) / W * W / H, (H - 1) / H))
    axis = -pose.position
    got = math.acos(float(np.dot(rays.directions[0, 0], axis)))
    assert got == pytest.approx(expected, abs=1e-12)


def test_center_ray_hits_origin():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pose = sample_camera(rng)
        rays = rays_for_camera(pose, 7, 7, 0.5, 2.0)
        d = rays.directions[3, 3]
        np.testing.assert_allclose(d, -pose.position, atol=1e-9)


def test_degenerate_bounds():
    pose = pose_from_angles(0, 0)
    with pytest.raises(ValueError):
        rays_for_camera(pose, 4, 4, 2.0, 1.0)
    with pytest.raises(ValueError):
        rays_for_camera(pose, 0, 4, 0.5, 1.0)


# ---------------------------------------------------------------- compositing

def _composite(density, deltas, feats=None):
    density = np.asarray(density, float)
    if feats is None:
        feats = np.ones(density.shape + (2,))
    return composite(Tensor(density), np.asarray(deltas, float), Tensor(feats),
                     np.cumsum(np.broadcast_to(deltas, density.shape), axis=-1))


def test_vacuum():
    c = _composite(np.zeros((3, 8)), np.full((3, 8), 0.1))
    assert (c.alpha.data == 0).all() and (c.feature.data == 0).all() and (c.residual.data == 1).all()


@pytest.mark.parametrize("c", [0.5, 2.0, 8.0])
def test_constant_density_closed_form(c):
    assert constant_density_error(c, 256) < 1e-3


def test_conservation_on_random_rays():
    assert conservation_error(10_000) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), s=st.integers(2, 40))
def test_weights_nonnegative_and_bounded(seed, s):
    rng = np.random.default_rng(seed)
    c = _composite(rng.exponential(5.0, (4, s)), rng.uniform(0, 0.5, (4, s)))
    assert (c.weights.data >= 0).all()
    assert (c.weights.data.sum(-1) <= 1 + 1e-9).all()


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), j=st.integers(0, 9), bump=st.floats(0.01, 10.0))
def test_occlusion_monotonicity(seed, j, bump):
    rng = np.random.default_rng(seed)
    dens = rng.exponential(1.0, (1, 10))
    deltas = rng.uniform(0.01, 0.3, (1, 10))
    before = _composite(dens, deltas).weights.data[0]
    dens2 = dens.copy()
    dens2[0, j] += bump
    after = _composite(dens2, deltas).weights.data[0]
    assert np.all(after[j + 1:] <= before[j + 1:] + 1e-15)


def test_quadrature_against_product_form():
    rng = np.random.default_rng(0)
    dens = rng.exponential(1.0, (5, 12))
    deltas = rng.uniform(0.01, 0.3, (5, 12))
    w = _composite(dens, deltas).weights.data
    alpha = 1 - np.exp(-dens * deltas)
    trans = np.cumprod(np.concatenate([np.ones((5, 1)), 1 - alpha[:, :-1]], axis=1), axis=1)
    np.testing.assert_allclose(w, trans * alpha, rtol=1e-12, atol=1e-15)


def test_composite_needs_two_samples():
    with pytest.raises(ValueError):
        _composite(np.ones((2, 1)), np.ones((2, 1)))


def test_depths():
    fg = foreground_depths(0.5, 2.0, 4, (1,))
    np.testing.assert_allclose(fg[0], [0.6875, 1.0625, 1.4375, 1.8125])
    jit = foreground_depths(0.5, 2.0, 4, (100,), np.random.default_rng(0))
    edges = 0.5 + np.arange(5) * 0.375
    assert np.all((jit >= edges[:-1]) & (jit <= edges[1:]))
    rays = rays_for_camera(pose_from_angles(0.1, 0.2), 5, 5, 0.5, 2.0)
    bg = background_depths(rays.origins, rays.directions, 4, 2.0)
    assert bg.shape == (5, 5, 4)
    assert np.all(bg >= 2.0) and np.all(np.diff(bg, axis=-1) >= 0)
    # unclamped samples sit on the spheres of radius 1/u, u = 7/8, 5/8, 3/8, 1/8
    pts = rays.origins[..., None, :] + bg[..., None] * rays.directions[..., None, :]
    inv_r = 1 / np.linalg.norm(pts, axis=-1)
    target = np.broadcast_to([7 / 8, 5 / 8, 3 / 8, 1 / 8], bg.shape)
    free = bg > 2.0
    assert free[..., 1:].all()
    np.testing.assert_allclose(inv_r[free], target[free], atol=1e-12)


def test_far_delta_closes_ray():
    c = _composite(np.array([[0.0, 0.0, 0.01]]), np.array([[1.0, 1.0, FAR_DELTA]]))
    assert c.residual.data[0] == 0.0


def test_conservation_with_background_delta():
    rng = np.random.default_rng(0)
    dens = rng.exponential(3.0, (1000, 20))
    deltas = np.concatenate([rng.uniform(0.01, 0.3, (1000, 19)), np.full((1000, 1), FAR_DELTA)], axis=1)
    c = _composite(dens, deltas)
    assert np.max(np.abs(c.weights.data.sum(-1) + c.residual.data - 1)) < 1e-9


# ---------------------------------------------------------------- heads

def test_ray_head():
    rng = np.random.default_rng(0)
    head = RayFeatureHead(rng, 6, 5, 7, 4, 2)
    f = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    d = rng.normal(size=(2, 3, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    a = head(f, d, w).data
    assert a.tobytes() == head(f, d, w).data.tobytes()
    assert not np.allclose(a, head(f, d[:, ::-1], w).data)
    assert T.grad_check(lambda f, w: T.tsum(T.sin(head(f, d, w))), [f, w]).max_error < 1e-4


def test_upsampler_shapes_and_range():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 16, 16, 4)) * 5)
    direct = Upsampler(rng, 4, "direct")(x).data
    up = Upsampler(rng, 4, "up2x")(x).data
    assert direct.shape == (1, 16, 16, 3) and up.shape == (1, 32, 32, 3)
    for img in (direct, up):
        assert img.min() >= 0 and img.max() <= 1
    with pytest.raises(ValueError):
        Upsampler(rng, 4, "bicubic")


def test_constant_feature_gives_constant_rgb():
    rng = np.random.default_rng(0)
    x = Tensor(np.broadcast_to(rng.normal(size=4), (1, 6, 6, 4)).copy())
    img = Upsampler(rng, 4, "direct")(x).data
    assert np.ptp(img.reshape(-1, 3), axis=0).max() == 0.0
    # up2x zero-pads at the border, so only the interior is constant
    img = Upsampler(rng, 4, "up2x")(x).data
    inner = img[:, 1:-1, 1:-1].reshape(-1, 3)
    assert np.ptp(inner, axis=0).max() < 1e-15


# ---------------------------------------------------------------- full pipeline

@pytest.fixture(scope="module")
def gen():
    cfg = TrainConfig()
    cfg.render.resolution = 8
    return Generator(cfg, np.random.default_rng(0))


def test_static_mode_time_invariant(gen):
    rng = np.random.default_rng(1)
    z, m = sample_unit_sphere(64, rng), sample_unit_sphere(64, rng)
    pose = sample_camera(rng)
    frames = [render_frame(gen, pose, t, z, m, static=True) for t in frame_times(16)]
    assert all(f.tobytes() == frames[0].tobytes() for f in frames)
    moving = [render_frame(gen, pose, t, z, m) for t in (0.0, 1.0)]
    assert moving[0].tobytes() != moving[1].tobytes()


def test_frame_times():
    np.testing.assert_allclose(frame_times(16), np.linspace(0, 1, 16))


def test_render_shapes(gen):
    rng = np.random.default_rng(2)
    out = gen.render([sample_camera(rng)] * 2, [0.1, 0.9], sample_unit_sphere(64, rng, 2),
                     sample_unit_sphere(64, rng, 2))
    assert out.rgb.shape == (2, 8, 8, 3) and out.features.shape == (2, 4, 4, 16)
    assert np.all((out.alpha >= 0) & (out.alpha <= 1 + 1e-9))
    assert np.all(out.rgb.data >= 0) and np.all(out.rgb.data <= 1)


def test_direct_and_up2x_shapes_agree():
    a, b = TrainConfig(), TrainConfig()
    a.render.upsample, a.render.resolution = "direct", 8
    b.render.upsample, b.render.resolution = "up2x", 8
    rng = np.random.default_rng(0)
    z, m = sample_unit_sphere(64, rng), sample_unit_sphere(64, rng)
    pose = pose_from_angles(0, 0)
    shapes = {render_frame(Generator(c, np.random.default_rng(1)), pose, 0.5, z, m).shape for c in (a, b)}
    assert shapes == {(8, 8, 3)}


def test_render_grad_wrt_z():
    cfg = small_config(4, 4)
    cfg.render.upsample, cfg.render.resolution = "direct", 4
    rng = np.random.default_rng(0)
    g = Generator(cfg, rng)
    z = Tensor(sample_unit_sphere(8, rng, 1), requires_grad=True)
    m = sample_unit_sphere(8, rng, 1)
    pose = [pose_from_angles(0.1, 0.2, 18.0)]
    res = T.grad_check(lambda z: T.mean(g.render(pose, [0.4], z, m).rgb), [z])
    assert res.max_error < 1e-3


def test_background_is_motion_free(gen):
    # the background field's call signature has no motion input
    import inspect
    assert list(inspect.signature(gen.bg.__call__).parameters) == ["x4", "w"]
