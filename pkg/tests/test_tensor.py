import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fourfield import tensor as T
from fourfield.tensor import Tensor


def rand(shape, seed=0, lo=-1.0, hi=1.0):
    return Tensor(np.random.default_rng(seed).uniform(lo, hi, shape), requires_grad=True)


# ---------------------------------------------------------------- construction

def test_leaf_shape_and_values():
    t = T.leaf([2], [1.0, 2.0])
    assert t.shape == (2,)
    assert t.parents == ()
    np.testing.assert_array_equal(t.data, [1.0, 2.0])


def test_leaf_count_mismatch():
    with pytest.raises(T.ShapeError):
        T.leaf([2, 2], [1.0, 2.0, 3.0])


def test_leaf_rejects_nan():
    with pytest.raises(T.NonFiniteError):
        T.leaf([3], [1.0, float("nan"), 0.0])


def test_op_output_has_parents():
    a = T.leaf([2], [1.0, 2.0], requires_grad=True)
    b = a * 2.0
    assert len(b.parents) >= 1


def test_nan_in_forward_raises():
    a = T.leaf([1], [1000.0], requires_grad=True)
    with pytest.raises(T.NonFiniteError):
        T.exp(a)


# ---------------------------------------------------------------- values

def test_matmul_identity_and_hand_case():
    eye = T.leaf([2, 2], [1, 0, 0, 1])
    np.testing.assert_array_equal(T.matmul(eye, T.leaf([2, 1], [3, 4])).data, [[3], [4]])
    out = T.matmul(T.leaf([2, 2], [1, 2, 3, 4]), T.leaf([2, 1], [5, 6]))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_dimension_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    assert T.leaky_relu(Tensor(-1.0), 0.2).item() == pytest.approx(-0.2)
    np.testing.assert_array_equal(T.add(T.leaf([3], [1, 2, 3]), 1.0).data, [2, 3, 4])
    assert T.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)


def test_log_domain_error():
    with pytest.raises(T.DomainError):
        T.log(T.leaf([2], [1.0, 0.0]))


def test_incompatible_broadcast():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_reductions_and_concat():
    assert T.tsum(T.leaf([3], [1, 2, 3])).item() == 6
    assert T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1)))], axis=1).shape == (2, 4)
    assert T.mean(Tensor(np.full((3, 4), 2.5))).item() == 2.5


def test_axis_and_range_errors():
    with pytest.raises(T.ShapeError):
        T.tsum(Tensor(np.ones((2, 2))), axis=2)
    with pytest.raises(T.ShapeError):
        T.slice_(Tensor(np.ones((2, 3))), [(0, 2), (1, 4)])


def test_slice_values():
    x = Tensor(np.arange(12.0).reshape(3, 4))
    np.testing.assert_array_equal(T.slice_(x, [(1, 3), (0, 2)]).data, [[4, 5], [8, 9]])


# ---------------------------------------------------------------- backward

def test_backward_examples():
    x = T.leaf([3], [1.0, -2.0, 5.0], requires_grad=True)
    g = T.backward(T.tsum(x), [x])
    np.testing.assert_array_equal(g[x].data, np.ones(3))
    x = T.leaf([2], [1.0, 2.0], requires_grad=True)
    np.testing.assert_array_equal(T.backward(T.tsum(x * x), [x])[x].data, [2.0, 4.0])


def test_gradient_map_has_every_leaf_once():
    x = rand((2, 3))
    y = rand((4,), seed=1)  # does not reach the loss
    gm = T.backward(T.tsum(T.exp(x)), [x, y])
    assert set(map(id, gm)) == {id(x), id(y)}
    assert gm[x].shape == x.shape
    np.testing.assert_array_equal(gm[y].data, np.zeros(4))


def test_non_scalar_loss():
    x = rand((3,))
    with pytest.raises(T.ShapeError):
        T.backward(x * 2.0, [x])


def test_matmul_grad_against_differences():
    a, b = rand((4, 3)), rand((3, 2), seed=1)
    assert T.grad_check(lambda a, b: T.tsum(T.matmul(a, b)), [a, b]).max_error < 1e-4


def test_three_layer_mlp_grad():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(5, 4)))
    ws = [rand((4, 6), 1), rand((6, 6), 2), rand((6, 1), 3)]
    bs = [rand((6,), 4), rand((6,), 5), rand((1,), 6)]

    def loss(*p):
        h = x
        for i in range(3):
            h = T.matmul(h, p[i]) + p[3 + i]
            if i < 2:
                h = T.leaky_relu(h)
        return T.mean(h * h)
    assert T.grad_check(loss, ws + bs, eps=1e-4).max_error < 1e-4


def test_grad_check_of_sum_is_exact():
    assert T.grad_check(T.tsum, [rand((3, 4))]).max_error < 1e-10


def test_grad_check_exp():
    assert T.grad_check(lambda x: T.tsum(T.exp(x)), [rand((10,))], eps=1e-5).max_error < 1e-6


def test_grad_check_excludes_kink():
    x = Tensor(np.array([0.0, 0.7, -0.4]), requires_grad=True)
    res = T.grad_check(lambda x: T.tsum(T.leaky_relu(x)), [x])
    assert (0, 0) in res.excluded
    assert res.checked == 2
    assert res.max_error < 1e-8


def test_grad_check_requires_scalar():
    with pytest.raises(T.ShapeError):
        T.grad_check(lambda x: x * 2.0, [rand((3,))])


def test_double_backward():
    x = T.leaf([1], [1.5], requires_grad=True)
    (g,) = T.grad(T.tsum(x * x * x * x), [x], create_graph=True)
    (gg,) = T.grad(T.tsum(g), [x])
    assert gg.item() == pytest.approx(12 * 1.5 ** 2, rel=1e-14)


UNARY = {
    "exp": T.exp, "sin": T.sin, "cos": T.cos, "sigmoid": T.sigmoid, "softplus": T.softplus,
    "leaky_relu": T.leaky_relu, "neg": T.neg, "square": lambda a: a * a,
    "log": lambda a: T.log(a * a + 1.0), "power": lambda a: T.power(a * a + 0.5, -0.5),
    "cumsum": lambda a: T.cumsum(a, -1), "flip": lambda a: T.flip(a, 0),
    "normalize": lambda a: T.normalize(a + 2.0, -1),
    "transpose": lambda a: T.transpose(a, (1, 0)), "div": lambda a: a / (a * a + 1.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_grad(name):
    op = UNARY[name]
    x = rand((3, 4), seed=7)
    proj = np.random.default_rng(8).normal(size=(3, 4))
    projv = proj if name != "transpose" else proj.T
    res = T.grad_check(lambda x: T.tsum(op(x) * Tensor(projv)), [x])
    assert res.max_error < 1e-4


def test_conv_and_upsample_grad():
    x = rand((2, 5, 5, 3))
    w = rand((3, 3, 3, 4), seed=1)
    b = rand((4,), seed=2)
    res = T.grad_check(lambda x, w, b: T.tsum(T.sin(T.conv2d(x, w, b, stride=2, padding=1))), [x, w, b])
    assert res.max_error < 1e-4
    res = T.grad_check(lambda x: T.tsum(T.sin(T.upsample_nearest2x(x))), [rand((1, 2, 3, 2))])
    assert res.max_error < 1e-4


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 5, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros_like(out)
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[0, i, j] = np.einsum("hwc,hwco->o", patch, w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_fancy_index_scatter_accumulates():
    x = rand((4, 3))
    idx = (np.array([0, 2, 0]), np.array([1, 1, 1]))
    gm = T.backward(T.tsum(T.getitem(x, idx)), [x])
    assert gm[x].data[0, 1] == 2.0
    assert gm[x].data[2, 1] == 1.0


@settings(max_examples=30, deadline=None)
@given(shape=st.lists(st.integers(1, 4), min_size=1, max_size=3),
       mask=st.lists(st.booleans(), min_size=3, max_size=3), seed=st.integers(0, 1000))
def test_broadcast_backward_equals_tiled(shape, mask, seed):
    rng = np.random.default_rng(seed)
    small_shape = tuple(1 if m else s for s, m in zip(shape, mask))
    small = Tensor(rng.normal(size=small_shape), requires_grad=True)
    big = rng.normal(size=tuple(shape))
    g_bcast = T.backward(T.tsum(T.mul(small, Tensor(big))), [small])[small].data
    tiled = np.broadcast_to(small.data, shape)
    # explicit tiling: d/dsmall sum(tile(small) * big) sums big over the tiled axes
    axes = tuple(i for i, (a, b) in enumerate(zip(small_shape, shape)) if a != b)
    g_tiled = big.sum(axis=axes, keepdims=True) if axes else big
    assert tiled.shape == tuple(shape)
    np.testing.assert_allclose(g_bcast, g_tiled, rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5), m=st.integers(1, 5))
def test_random_composite_grad(seed, n, m):
    a, b = rand((n, m), seed), rand((m, 3), seed + 1)
    f = lambda a, b: T.tsum(T.softplus(T.matmul(T.sin(a), b)) * T.sigmoid(T.tsum(a)))
    assert T.grad_check(f, [a, b]).max_error < 1e-4


def test_evaluation_is_deterministic():
    def run():
        x = Tensor(np.random.default_rng(5).normal(size=(20, 7)))
        w = Tensor(np.random.default_rng(6).normal(size=(7, 7)))
        return T.softplus(T.matmul(x, w)).data.tobytes()
    assert run() == run()


def test_no_grad_builds_no_graph():
    x = rand((3,))
    with T.no_grad():
        y = T.exp(x)
    assert not y.requires_grad and y.parents == ()
