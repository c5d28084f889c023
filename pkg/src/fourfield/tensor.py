"""Dense float64 tensors with reverse-mode automatic differentiation.

Every backward rule is written in terms of other differentiable ops, so a
gradient computed with ``create_graph=True`` is itself part of a graph and can
be differentiated once more (the R1 penalty relies on this).

A graph belongs to the thread that built it. Plain arrays pulled out with
``.data`` (or tensors built under :func:`no_grad`) are safe to share.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
LEAKY_SLOPE = 0.2


class TensorError(ValueError):
    """Base class for tensor errors."""


class ShapeError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


class DomainError(TensorError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def grad_mode(enabled: bool):
    prev = _grad_enabled()
    _state.grad_enabled = enabled
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return grad_mode(False)


# Records the activation pattern of every kinked op during a forward pass.
# grad_check uses it to detect finite-difference stencils that straddle a kink.
@contextlib.contextmanager
def kink_watch():
    prev = getattr(_state, "kinks", None)
    record: list[bytes] = []
    _state.kinks = record
    try:
        yield record
    finally:
        _state.kinks = prev


def _note_kink(pattern: np.ndarray) -> None:
    record = getattr(_state, "kinks", None)
    if record is not None:
        record.append(np.packbits(pattern.ravel()).tobytes())


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op!r}")


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __pow__(self, p: float): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar():
    raise ShapeError("item() needs a single-element tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def leaf(shape: Sequence[int], values, requires_grad: bool = False) -> Tensor:
    """Build a graph leaf from a shape and row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    flat = np.asarray(values, dtype=DTYPE).reshape(-1)
    if flat.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"{flat.size} values do not fill shape {shape}")
    _check_finite(flat, "leaf")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad)


def param(data: np.ndarray) -> Tensor:
    data = np.array(data, dtype=DTYPE)
    _check_finite(data, "param")
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    _check_finite(data, op)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------- broadcasting

def _broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"shapes {shapes} do not broadcast") from exc


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape``; the adjoint of broadcasting."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape
    return _make(data, (x,), lambda g, needs: (broadcast_to(g, src),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape
    return _make(np.ascontiguousarray(data), (x,),
                 lambda g, needs: (sum_to(g, src),), "broadcast_to")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g, needs: (sum_to(g, sa) if needs[0] else None,
                                   sum_to(g, sb) if needs[1] else None), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g, needs: (sum_to(g, sa) if needs[0] else None,
                                   sum_to(neg(g), sb) if needs[1] else None), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return _make(a.data * b.data, (a, b),
                 lambda g, needs: (sum_to(mul(g, b), a.shape) if needs[0] else None,
                                   sum_to(mul(g, a), b.shape) if needs[1] else None), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g, needs: (scale(g, c),), "scale")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    if (b.data == 0).any():
        raise DomainError("division by zero")

    def backward(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p != int(p) and (a.data < 0).any():
        raise DomainError("fractional power of a negative value")
    if p < 0 and (a.data == 0).any():
        raise DomainError("negative power of zero")
    return _make(a.data ** p, (a,),
                 lambda g, needs: (mul(g, scale(power(a, p - 1.0), p)),), "power")


def _with_output(data: np.ndarray, parents: tuple, rule, op: str) -> Tensor:
    """Build a node whose backward rule reuses the node's own output."""
    out = _make(data, parents, None, op)
    if out.requires_grad:
        out.backward_fn = lambda g, needs: rule(g, out)
    return out


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        data = np.exp(a.data)
    return _with_output(data, (a,), lambda g, out: (mul(g, out),), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    return _make(np.log(a.data), (a,), lambda g, needs: (div(g, a),), "log")


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), (a,), lambda g, needs: (mul(g, cos(a)),), "sin")


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), (a,), lambda g, needs: (neg(mul(g, sin(a))),), "cos")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    return _with_output(_sigmoid_np(a.data), (a,),
                        lambda g, out: (mul(g, mul(out, sub(1.0, out))),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(data, (a,), lambda g, needs: (mul(g, sigmoid(a)),), "softplus")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = a.data > 0
    _note_kink(pos)
    factor = Tensor(np.where(pos, 1.0, slope))
    return _make(a.data * factor.data, (a,), lambda g, needs: (mul(g, factor),), "leaky_relu")


def where_const(mask: np.ndarray, a, b) -> Tensor:
    """Select between ``a`` and ``b`` with a constant boolean mask."""
    m = Tensor(np.asarray(mask, dtype=DTYPE))
    return add(mul(as_tensor(a), m), mul(as_tensor(b), sub(1.0, m)))


# ---------------------------------------------------------------- linear algebra

def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])

    def backward(g, needs):
        ga = sum_to(matmul(g, _swap_last(b)), a.shape) if needs[0] else None
        gb = sum_to(matmul(_swap_last(a), g), b.shape) if needs[1] else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# ---------------------------------------------------------------- shape ops

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim} dimensions")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))
    src = a.shape
    return _make(np.asarray(data), (a,),
                 lambda g, needs: (broadcast_to(reshape(g, kept), src),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes], dtype=np.int64))
    return scale(tsum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return _make(data, (a,), lambda g, needs: (reshape(g, src),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g, needs: (transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    try:
        data = a.data[idx]
    except IndexError as exc:
        raise ShapeError(str(exc)) from exc
    src = a.shape
    return _make(np.array(data, dtype=DTYPE), (a,),
                 lambda g, needs: (scatter(g, idx, src),), "getitem")


def _is_basic(idx) -> bool:
    # basic indexing never repeats an element, so plain assignment is exact
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def scatter(a: Tensor, idx, shape: tuple[int, ...]) -> Tensor:
    """Zeros of ``shape`` with ``a`` added at ``idx`` (the adjoint of indexing)."""
    data = np.zeros(shape, dtype=DTYPE)
    if _is_basic(idx):
        data[idx] = a.data
    else:
        np.add.at(data, idx, a.data)
    return _make(data, (a,), lambda g, needs: (getitem(g, idx),), "scatter")


def _check_range(start, stop, extent, what):
    if not (0 <= start <= stop <= extent):
        raise ShapeError(f"{what} range [{start}, {stop}) out of bounds for extent {extent}")


def slice_(a: Tensor, ranges: Sequence[tuple[int, int] | None]) -> Tensor:
    """Contiguous sub-block; ``ranges[i]`` is ``(start, stop)`` or None for all."""
    if len(ranges) > a.ndim:
        raise ShapeError("more ranges than dimensions")
    idx = []
    for ax, r in enumerate(ranges):
        if r is None:
            idx.append(slice(None))
        else:
            _check_range(r[0], r[1], a.shape[ax], f"axis {ax}")
            idx.append(slice(r[0], r[1]))
    return getitem(a, tuple(idx))


def pad(a: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    shape = tuple(s + lo + hi for s, (lo, hi) in zip(a.shape, widths))
    idx = tuple(slice(lo, lo + s) for s, (lo, _) in zip(a.shape, widths))
    return scatter(a, idx, shape)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    ndim = tensors[0].ndim
    ax = _norm_axes(axis, ndim)[0]
    for t in tensors:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat shapes disagree off axis {ax}: {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g, needs):
        out = []
        for k in range(len(tensors)):
            if not needs[k]:
                out.append(None)
                continue
            idx = [slice(None)] * ndim
            idx[ax] = slice(int(bounds[k]), int(bounds[k + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def flip(a: Tensor, axis: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(None, None, -1)
    return getitem(a, tuple(idx))


def cumsum(a: Tensor, axis: int) -> Tensor:
    return _make(np.cumsum(a.data, axis=axis), (a,),
                 lambda g, needs: (flip(cumsum(flip(g, axis), axis), axis),), "cumsum")


def normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean length."""
    sq = tsum(mul(a, a), axis, keepdims=True)
    _note_kink(sq.data > eps)
    if (sq.data <= 0).any():
        raise DomainError("normalizing a zero vector")
    return mul(a, power(sq, -0.5))


# ---------------------------------------------------------------- network helpers

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last 2D convolution; ``x`` is (B,H,W,C), ``w`` is (kh,kw,C,O)."""
    kh, kw, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv expects {cin} input channels, got {x.shape[-1]}")
    if padding:
        x = pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    H, W = x.shape[1], x.shape[2]
    ho, wo = (H - kh) // stride + 1, (W - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv input smaller than kernel")
    if kh == kw == 1 and stride == 1:
        cols = x
    else:
        taps = [getitem(x, (slice(None), slice(ky, ky + stride * (ho - 1) + 1, stride),
                            slice(kx, kx + stride * (wo - 1) + 1, stride), slice(None)))
                for ky in range(kh) for kx in range(kw)]
        cols = concat(taps, axis=-1)
    out = matmul(cols, reshape(w, (kh * kw * cin, cout)))
    return out if b is None else add(out, b)


def upsample_nearest2x(x: Tensor) -> Tensor:
    B, H, W, C = x.shape
    y = broadcast_to(reshape(x, (B, H, 1, W, 1, C)), (B, H, 2, W, 2, C))
    return reshape(y, (B, 2 * H, 2 * W, C))


# ---------------------------------------------------------------- differentiation

class GradientMap(dict):
    """Leaf tensor -> gradient tensor (keys compare by identity)."""


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, leaves: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a single-element ``loss`` with respect to each of ``leaves``.

    Leaves that do not reach the loss get zeros. With ``create_graph`` the
    returned gradients carry their own graph.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a single-element loss, got shape {loss.shape}")
    wanted = {id(t) for t in leaves}
    order = _topo_order(loss) if loss.requires_grad else []
    # only propagate into nodes that lead to a requested leaf
    useful: set[int] = set()
    for node in order:
        if id(node) in wanted or any(id(p) in useful for p in node.parents):
            useful.add(id(node))

    grads: dict[int, Tensor] = {}
    with grad_mode(create_graph):
        if id(loss) in useful:
            grads[id(loss)] = Tensor(np.ones_like(loss.data))
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            if id(node) not in wanted:
                del grads[id(node)]
            needs = tuple(p.requires_grad and id(p) in useful for p in node.parents)
            if not any(needs):
                continue
            pgrads = node.backward_fn(g, needs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for t in leaves:
        g = grads.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def backward(loss: Tensor, leaves: Iterable[Tensor]) -> GradientMap:
    leaves = list(leaves)
    return GradientMap(zip(leaves, grad(loss, leaves)))


# ---------------------------------------------------------------- finite differences

@dataclass
class GradCheckResult:
    max_error: float
    checked: int
    excluded: list[tuple[int, int]] = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_error


def grad_check(f: Callable[..., Tensor], inputs: Tensor | Sequence[Tensor], eps: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare autodiff gradients of scalar ``f(*inputs)`` against central differences.

    The error per coordinate is ``|a - b| / max(1, |a|, |b|)``. Coordinates whose
    stencil crosses a kink (leaky ReLU sign change, normalization at zero) are
    reported in ``excluded`` rather than scored. ``max_coords`` samples at most
    that many coordinates per input.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        _check_finite(t.data, "grad_check input")
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
    try:
        out = f(*inputs)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        analytic = [g.data for g in grad(out, inputs)]

        def evaluate() -> tuple[float, list[bytes]]:
            # f may differentiate internally (R1), so the graph stays on
            with kink_watch() as kinks:
                value = float(f(*inputs).data.reshape(-1)[0])
            return value, kinks

        rng = np.random.default_rng(seed)
        worst, checked, excluded = 0.0, 0, []
        for k, t in enumerate(inputs):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp, kp = evaluate()
                flat[i] = orig - eps
                fm, km = evaluate()
                flat[i] = orig
                if kp != km:
                    excluded.append((k, int(i)))
                    continue
                num = (fp - fm) / (2 * eps)
                a = analytic[k].reshape(-1)[i]
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                worst = max(worst, err)
                checked += 1
        return GradCheckResult(float(worst), checked, excluded)
    finally:
        for t, flag in zip(inputs, flags):
            t.requires_grad = flag
