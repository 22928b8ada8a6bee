"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape`.  Outside a tape
every op still computes its value but nothing is recorded, which is how
inference and finite-difference probes run.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    ...     tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels

EPS = 1e-8
"""Guard added inside logarithms and norms by the objectives."""

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_node_ids = itertools.count()
_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class branch_trace:
    """Collects the branch taken by every piecewise op evaluated inside the block.

    Two evaluations with equal traces lie on the same smooth piece, which is
    what a central difference needs.
    """

    def __enter__(self) -> list:
        self.previous = getattr(_tls, "branches", None)
        _tls.branches = []
        return _tls.branches

    def __exit__(self, *exc) -> None:
        _tls.branches = self.previous


def _note_branch(decision: np.ndarray) -> None:
    log = getattr(_tls, "branches", None)
    if log is not None:
        log.append(decision)


@dataclass
class Record:
    kind: str
    inputs: tuple
    output: "Tensor"
    backward: Callable


@dataclass
class Tape:
    """Ordered op records; :meth:`backward` walks them once, newest first."""

    records: list = field(default_factory=list)
    visits: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().remove(self)

    def backward(self, root: "Tensor") -> dict:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

        Returns the mapping ``node_id -> gradient`` for the leaves reached.
        """
        if root.data.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads = {root.node_id: np.ones_like(root.data)}
        leaves = {}
        for rec in reversed(self.records):
            self.visits += 1
            g = grads.pop(rec.output.node_id, None)
            if g is None:
                continue
            for inp, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node_id in grads:
                    grads[inp.node_id] = grads[inp.node_id] + ig
                else:
                    grads[inp.node_id] = ig
                if inp._is_leaf:
                    leaves[inp.node_id] = inp
        if root._is_leaf and root.requires_grad:
            leaves[root.node_id] = root
        out = {}
        for nid, leaf in leaves.items():
            g = grads[nid]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
            out[nid] = g
        return out


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._is_leaf = True

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> dict:
        tape = active_tape()
        if tape is None:
            raise RuntimeError("backward() needs an active Tape")
        return tape.backward(self)

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self, eps: float = 0.0):
        return log(self, eps)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of op ``kind``; ``backward(g)`` returns one gradient per input."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {kind}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_ids)
    out._is_leaf = False
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        tape.records.append(Record(kind, tuple(inputs), out, backward))
    return out


# -- broadcasting ---------------------------------------------------------------
def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a} and {b}") from None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return record_op(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return record_op(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    return record_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    """a / b for strictly positive b."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    if (b.data <= 0).any():
        raise DomainError("division by a value <= 0")
    q = a.data / b.data
    return record_op(
        "div",
        q,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * q / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record_op("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return record_op("exp", e, (a,), lambda g: (g * e,))


def log(a, eps: float = 0.0) -> Tensor:
    """Natural log of ``a + eps``; every shifted value must be > 0."""
    a = as_tensor(a)
    shifted = a.data + eps
    if (shifted <= 0).any():
        raise DomainError("log of a value <= 0")
    return record_op("log", np.log(shifted), (a,), lambda g: (g / shifted,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if not p.is_integer() and (a.data < 0).any():
        raise DomainError("fractional power of a negative value")
    return record_op("power", a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    a = as_tensor(a)
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    _note_branch(inside)
    return record_op("clamp", np.clip(a.data, lo_, hi_), (a,), lambda g: (g * inside,))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    _note_branch(positive)
    scale = np.where(positive, 1.0, slope)
    return record_op("leaky_relu", a.data * scale, (a,), lambda g: (g * scale,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "log": log,
    "exp": exp,
    "power": power,
    "clamp": clamp,
    "leaky_relu": leaky_relu,
}


def elementwise(kind: str, a, b=None, **kw) -> Tensor:
    fn = _ELEMENTWISE[kind]
    return fn(a, **kw) if b is None else fn(a, b, **kw)


# -- shape manipulation ---------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return record_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return record_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record_op("getitem", np.array(a.data[idx]), (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_pixels(a, index: np.ndarray) -> Tensor:
    """Per-sample pixel gather on a (B, C, H, W) tensor.

    ``index`` is (B, H*W) of source flat positions, -1 meaning "fill with zero".
    Each row must be injective on its non-negative entries.
    """
    a = as_tensor(a)
    B, C, H, W = a.shape
    flat = a.data.reshape(B, C, H * W)
    valid = index >= 0
    src = np.where(valid, index, 0)
    out = np.take_along_axis(flat, src[:, None, :], axis=2) * valid[:, None, :]

    def backward(g):
        gflat = g.reshape(B, C, H * W) * valid[:, None, :]
        full = np.zeros((B, C, H * W))
        for b in range(B):
            full[b][:, src[b][valid[b]]] = gflat[b][:, valid[b]]
        return (full.reshape(a.shape),)

    return record_op("take_pixels", out.reshape(a.shape), (a,), backward)


# -- linear algebra -------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
    return record_op("matmul", a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2-D cross-correlation of (B,C,H,W) with (O,C,kh,kw), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shapes incompatible: {x.shape} and {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d kernel extents must be odd")
    H, W = x.shape[2] + 2 * padding, x.shape[3] + 2 * padding
    if kh > H or kw > W:
        raise ShapeError("kernel larger than padded input")
    out_h = (H - kh) // stride + 1
    out_w = (W - kw) // stride + 1
    if padding:
        xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xpad, wd, stride, out_h, out_w)
    inputs = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None]
        inputs = (x, w, bias)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = None
        if x.requires_grad:
            gx = kernels.conv2d_backward_input(g, wd, stride, H, W)
            if padding:
                gx = gx[:, :, padding:-padding, padding:-padding]
        gw = kernels.conv2d_backward_weight(g, xpad, stride, kh, kw) if w.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record_op("conv2d", out, inputs, backward)


# -- reductions and resampling --------------------------------------------------
def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("empty reduction")
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op("sum", np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("empty reduction")
    count = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return sum(a, axis, keepdims) * (1.0 / count)


def max_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError("max-pool needs spatial extents >= 2")
    out, arg = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))
    _note_branch(arg)

    def backward(g):
        gx = kernels.maxpool2x2_backward(np.ascontiguousarray(g), arg)
        if gx.shape != x.shape:
            full = np.zeros(x.shape)
            full[:, :, : gx.shape[2], : gx.shape[3]] = gx
            gx = full
        return (gx,)

    return record_op("max_pool2x2", out, (x,), backward)


def avg_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return record_op(
        "avg_pool2x2", out, (x,), lambda g: (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)
    )


def global_avg_pool(x) -> Tensor:
    """(B, C, H, W) -> (B, C)."""
    return mean(x, axis=(2, 3))


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return record_op(
        "upsample_nearest2x", out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)
    )


_REDUCE = {
    "sum": lambda x, axes: sum(x, axes),
    "mean": lambda x, axes: mean(x, axes),
    "max_pool2x2": lambda x, axes: max_pool2x2(x),
    "global_avg_pool": lambda x, axes: global_avg_pool(x),
}


def reduce(kind: str, x, axes=None) -> Tensor:
    return _REDUCE[kind](x, axes)


def box_sum(x, radius: int) -> Tensor:
    """Sum over each fully-interior (2r+1)^2 window of the last two axes."""
    x = as_tensor(x)
    k = 2 * radius + 1
    lead, (H, W) = x.shape[:-2], x.shape[-2:]
    if H < k or W < k:
        raise ShapeError(f"image {H}x{W} smaller than {k}x{k} window")
    planes = np.ascontiguousarray(x.data.reshape(-1, H, W))
    out = kernels.box_sum_valid(planes, radius)
    oh, ow = out.shape[1:]

    def backward(g):
        gp = kernels.box_sum_adjoint(np.ascontiguousarray(g.reshape(-1, oh, ow)), radius)
        return (gp.reshape(x.shape),)

    return record_op("box_sum", out.reshape(lead + (oh, ow)), (x,), backward)


# -- normalizations -------------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return record_op("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)
    return record_op("log_softmax", out, (x,), lambda g: (g - y * g.sum(axis=axis, keepdims=True),))


def l2_normalize(v, axis: int = -1, eps: float = EPS) -> Tensor:
    """v / max(||v||, eps) along ``axis``."""
    v = as_tensor(v)
    norm = np.sqrt((v.data**2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = v.data / denom
    active = norm > eps

    def backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return ((g - np.where(active, out * radial, 0.0)) / denom,)

    return record_op("l2_normalize", out, (v,), backward)


# -- gradient utilities ---------------------------------------------------------
def value_and_grad(f: Callable, params: Sequence[np.ndarray]):
    """Evaluate scalar ``f(*tensors)`` and its gradient w.r.t. each array in ``params``.

    Unused inputs get zero gradients.
    """
    leaves = [Tensor(p, requires_grad=True) for p in params]
    with Tape() as tape:
        out = f(*leaves)
        tape.backward(out)
    grads = [np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad for leaf in leaves]
    return out.item(), grads


@dataclass
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    f: Callable,
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    sample_count: int = 100,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
    min_scale: float = 0.0,
) -> GradCheck:
    """Compare analytic gradients with central differences on sampled coordinates.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-8)``.  With ``skip_kinks``,
    a coordinate whose +-h probes change a branch of a piecewise op (see
    :class:`branch_trace`) is skipped and replaced by another coordinate, since
    a central difference across a kink does not estimate the derivative.
    Coordinates where both the analytic and the numeric value are below
    ``min_scale`` are likewise replaced: there the difference quotient is
    dominated by rounding in ``f``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    params = [np.array(p, dtype=np.float64) for p in params]
    with branch_trace() as base_branches:
        _, grads = value_and_grad(f, params)
    sizes = [p.size for p in params]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(int(offsets[-1]))

    def evaluate(arrays):
        with branch_trace() as branches:
            val = f(*[Tensor(a) for a in arrays]).item()
        if not np.isfinite(val):
            raise NonFiniteError("objective is not finite")
        return val, branches

    worst, checked, skipped = 0.0, 0, 0
    for flat in order:
        if checked == sample_count:
            break
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[which])
        plus = [p.copy() for p in params]
        minus = [p.copy() for p in params]
        plus[which].reshape(-1)[local] += h
        minus[which].reshape(-1)[local] -= h
        f_plus, b_plus = evaluate(plus)
        f_minus, b_minus = evaluate(minus)
        if skip_kinks and not (_same_branches(b_plus, base_branches) and _same_branches(b_minus, base_branches)):
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = grads[which].reshape(-1)[local]
        if max(abs(analytic), abs(numeric)) < min_scale:
            skipped += 1
            continue
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
        checked += 1
    return GradCheck(worst, checked, skipped)


def finite_diff_check(
    f: Callable,
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    sample_count: int = 100,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
    min_scale: float = 0.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``sample_count`` coordinates are drawn across all parameters (all of them
    when there are fewer).  See :func:`gradient_check` for the details.
    """
    return gradient_check(f, params, h, sample_count, rng, skip_kinks, min_scale).max_rel_error
