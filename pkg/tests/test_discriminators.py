import numpy as np
import pytest

from fourfield import tensor as T
from fourfield.config import TrainConfig
from fourfield.discriminators import (AugmentParams, deteriorated_input, diff_augment, draw_augment,
                                      image_discriminator, pair_to_input, time_discriminator)
from fourfield.tensor import Tensor
from fourfield.training import AdamHyper, OptimizerState, adam_step, adv_loss_d


def frames(seed, shape=(2, 8, 8, 3)):
    return np.random.default_rng(seed).uniform(size=shape)


def test_pair_input_layout():
    a, b = frames(0), frames(1)
    x = pair_to_input(a, b, np.array([0.25, 0.5])).data
    assert x.shape == (2, 8, 8, 7)
    np.testing.assert_array_equal(x[..., :3], a)
    np.testing.assert_array_equal(x[..., 3:6], b)
    assert (x[0, ..., 6] == 0.25).all() and (x[1, ..., 6] == 0.5).all()


def test_pair_input_errors():
    a, b = frames(0), frames(1)
    with pytest.raises(ValueError):
        pair_to_input(b, a, np.array([-0.25, -0.25]))
    with pytest.raises(ValueError):
        pair_to_input(a, b, 0.0)
    with pytest.raises(T.ShapeError):
        pair_to_input(a, frames(2, (2, 4, 4, 3)), 0.5)


def test_deteriorated_input():
    f = frames(0)
    x = deteriorated_input(f).data
    np.testing.assert_array_equal(x[..., :3], x[..., 3:6])
    assert (x[..., 6] == 0).all()


def test_discriminators_are_pure_and_checked():
    rng = np.random.default_rng(0)
    dt, di = time_discriminator(rng), image_discriminator(rng)
    x = pair_to_input(frames(0), frames(1), 0.5)
    assert dt(x).shape == (2,)
    assert dt(x).data.tobytes() == dt(x).data.tobytes()
    assert di(frames(2)).data.tobytes() == di(frames(2)).data.tobytes()
    with pytest.raises(T.ShapeError):
        dt(frames(0))
    assert dt.convs[0].weight.shape[2] == 7 and di.convs[0].weight.shape[2] == 3


def test_discriminator_pixel_grads():
    rng = np.random.default_rng(0)
    dt, di = time_discriminator(rng), image_discriminator(rng)
    x = Tensor(pair_to_input(frames(0), frames(1), 0.5).data, requires_grad=True)
    f = Tensor(frames(3), requires_grad=True)
    assert T.grad_check(lambda x: T.tsum(dt(x)), [x], max_coords=60).max_error < 1e-4
    assert T.grad_check(lambda f: T.tsum(di(f)), [f], max_coords=60).max_error < 1e-4


def test_dt_reaches_score_only_through_channel():
    rng = np.random.default_rng(0)
    dt = time_discriminator(rng)
    a, b = frames(0), frames(1)
    x1 = pair_to_input(a, b, 0.2).data
    x2 = pair_to_input(a, b, 0.9).data
    assert not np.array_equal(dt(x1).data, dt(x2).data)
    x1[..., 6] = 0
    x2[..., 6] = 0
    assert dt(x1).data.tobytes() == dt(x2).data.tobytes()


def test_augment_policies():
    rng = np.random.default_rng(0)
    x = frames(0, (4, 5, 5, 3))
    none = draw_augment(rng, 4, ("none",))
    np.testing.assert_array_equal(diff_augment(x, none).data, x)
    flip = AugmentParams(np.array([True, False, True, True]), None)
    np.testing.assert_array_equal(diff_augment(diff_augment(x, flip), flip).data, x)
    np.testing.assert_array_equal(diff_augment(x, flip).data[0], x[0, :, ::-1])
    with pytest.raises(ValueError):
        draw_augment(rng, 4, ("cutout",))
    p = draw_augment(rng, 1000, ("brightness",))
    assert np.abs(p.shift).max() <= 0.1 and p.shift.shape == (1000, 3)


def test_same_draw_for_real_and_fake():
    p = draw_augment(np.random.default_rng(0), 3, ("flip", "brightness"))
    real, fake = frames(0, (3, 4, 4, 3)), frames(1, (3, 4, 4, 3))
    # the augmentation is a function of the draw alone: applying it to the
    # difference equals the difference of the applied results, up to the shift
    diff = diff_augment(real, p).data - diff_augment(fake, p).data
    flipped = np.where(p.flip[:, None, None, None], (real - fake)[:, :, ::-1], real - fake)
    np.testing.assert_allclose(diff, flipped, atol=1e-15)


def test_brightness_gradient():
    x = Tensor(frames(0, (2, 3, 3, 3)), requires_grad=True)
    p = draw_augment(np.random.default_rng(1), 2, ("flip", "brightness"))
    assert T.grad_check(lambda x: T.tsum(T.sin(diff_augment(x, p))), [x]).max_error < 1e-4


def toy_pairs(rng, n, size=8):
    """Real: a bar moving right by dt*size; fake: the same frames shuffled into a random order."""
    a = np.zeros((n, size, size, 3))
    b = np.zeros((n, size, size, 3))
    dt = rng.integers(1, size // 2, n) / (size - 1)
    start = rng.integers(0, size // 2, n)
    for k in range(n):
        a[k, :, start[k]] = 1.0
        b[k, :, start[k] + int(round(dt[k] * (size - 1)))] = 1.0
    return a, b, dt


def test_time_discriminator_separates_motion_direction():
    rng = np.random.default_rng(0)
    dt_net = time_discriminator(np.random.default_rng(1))
    params = dt_net.parameters()
    opt = OptimizerState.for_params(params)
    hyper = AdamHyper(lr=0.01, beta1=0.0, beta2=0.99)

    def batch(n):
        a, b, dt = toy_pairs(rng, n)
        real = pair_to_input(a, b, dt)
        fake = pair_to_input(b, a, dt)  # same frames, motion reversed
        return real, fake

    for _ in range(150):
        real, fake = batch(16)
        loss = adv_loss_d(dt_net(real), dt_net(fake))
        names = list(params)
        grads = T.grad(loss, [params[n] for n in names])
        adam_step(params, {n: g.data for n, g in zip(names, grads)}, opt, hyper)
    real, fake = batch(200)
    acc = ((dt_net(real).data > 0).mean() + (dt_net(fake).data < 0).mean()) / 2
    assert acc > 0.9
