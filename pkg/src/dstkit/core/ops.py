"""Differentiable ops on :class:`~dstkit.core.tensor.Tensor`.

Each function computes its forward result with numpy and registers a
backward closure through :func:`make_result`. Log and division floor their
denominators/arguments at ``EPS``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import EPS, AttrError, ShapeError, Tensor, as_tensor, make_result, unbroadcast

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "relu", "sigmoid", "tanh",
    "softmax", "log_softmax", "matmul", "bias_add", "sum", "mean", "max", "reshape",
    "transpose", "flatten", "clamp", "conv2d", "avg_pool2d", "global_avg_pool",
    "upsample_nearest", "hard_sigmoid", "ste_binarize", "pairwise_distance", "where_mask",
    "forward",
]


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def grad_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result("add", a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def grad_fn(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result("sub", a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def grad_fn(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result("mul", a.data * b.data, (a, b), grad_fn)


def _floor_abs(x: np.ndarray) -> np.ndarray:
    # keep sign, push |x| up to EPS; zero maps to +EPS
    return np.where(np.abs(x) < EPS, np.where(x < 0, -EPS, EPS), x)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    denom = _floor_abs(b.data)
    out = a.data / denom
    passthrough = np.abs(b.data) >= EPS

    def grad_fn(g):
        ga = unbroadcast(g / denom, a.shape)
        gb = unbroadcast(np.where(passthrough, -g * out / denom, 0.0), b.shape)
        return ga, gb

    return make_result("div", out, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = a.data ** exponent

    def grad_fn(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return make_result("pow", out, (a,), grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with the argument floored at ``EPS``."""
    a = as_tensor(a)
    floored = np.maximum(a.data, EPS)
    live = a.data >= EPS

    def grad_fn(g):
        return (np.where(live, g / floored, 0.0),)

    return make_result("log", np.log(floored), (a,), grad_fn)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return make_result("clamp", out, (a,), lambda g: (g * inside,))


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` else ``b`` (mask is constant)."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)

    def grad_fn(g):
        return unbroadcast(np.where(mask, g, 0.0), a.shape), unbroadcast(np.where(mask, 0.0, g), b.shape)

    return make_result("where", out, (a, b), grad_fn)


# -- softmax family ---------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (a,), grad_fn)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def grad_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (a,), grad_fn)


# -- linear algebra ---------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return make_result("matmul", a.data @ b.data, (a, b), grad_fn)


def bias_add(x, bias) -> Tensor:
    """Add a per-channel bias along axis 1 (dense: N×C, conv: N×C×H×W)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise ShapeError("bias_add", x.shape, bias.shape)
    view = (1, -1) + (1,) * (x.ndim - 2)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)

    def grad_fn(g):
        return g, g.sum(axis=reduce_axes)

    return make_result("bias_add", x.data + bias.data.reshape(view), (x, bias), grad_fn)


# -- reductions & shape -----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise AttrError(f"axis {ax} out of range for ndim {ndim}")
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result("sum", np.asarray(out, dtype=np.float64), (a,), grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result("mean", np.asarray(out, dtype=np.float64), (a,), grad_fn)


def max(a, axis: int = -1) -> Tensor:  # noqa: A001
    """Max along one axis; gradient goes to the first maximal entry."""
    a = as_tensor(a)
    ax = _norm_axes(axis, a.ndim)[0]
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax).squeeze(ax)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return make_result("max", out, (a,), grad_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a) -> Tensor:
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return make_result("transpose", out, (a,), lambda g: (np.transpose(g, inverse),))


# -- convolution & pooling --------------------------------------------

def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation via im2col + matmul. ``x``: N×C×H×W, ``w``: O×C×kh×kw."""
    x, w = as_tensor(x), as_tensor(w)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise AttrError(f"conv2d: unsupported stride {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise AttrError(f"conv2d: unsupported padding {padding!r}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        return gx, gw

    return make_result("conv2d", np.ascontiguousarray(out), (x, w), grad_fn)


def avg_pool2d(x, kernel: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", x.shape)
    n, c, h, w = x.shape
    if kernel < 1 or h % kernel or w % kernel:
        raise AttrError(f"avg_pool2d: kernel {kernel} does not tile {h}x{w}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))

    def grad_fn(g):
        up = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
        return (up / (kernel * kernel),)

    return make_result("avg_pool2d", out, (x,), grad_fn)


def global_avg_pool(x) -> Tensor:
    """Average over spatial axes: N×C×H×W -> N×C. N×C inputs pass through."""
    x = as_tensor(x)
    if x.ndim == 2:
        return x
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", x.shape)
    return mean(x, axis=(2, 3))


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_nearest", x.shape)
    if factor < 1:
        raise AttrError(f"upsample_nearest: bad factor {factor}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result("upsample_nearest", out, (x,), grad_fn)


# -- gates ------------------------------------------------------------

def hard_sigmoid(g, k: float = 1.0) -> Tensor:
    """``max(0, min(k*g + 1/2, 1))``."""
    g = as_tensor(g)
    pre = k * g.data + 0.5
    out = np.minimum(np.maximum(pre, 0.0), 1.0)
    active = (pre > 0.0) & (pre < 1.0)
    return make_result("hard_sigmoid", out, (g,), lambda gr: (gr * k * active,))


def ste_binarize(soft, threshold: float = 0.5) -> Tensor:
    """Forward ``soft >= threshold`` as 0/1; backward is the identity."""
    soft = as_tensor(soft)
    out = (soft.data >= threshold).astype(np.float64)
    return make_result("ste_binarize", out, (soft,), lambda g: (g,))


# -- graph edges --------------------------------------------------------

def pairwise_distance(x) -> Tensor:
    """Euclidean distance matrix between the rows of a B×K tensor.

    The derivative of a zero distance is taken as zero (the diagonal and any
    coincident rows).
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("pairwise_distance", x.shape)
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    safe = np.where(dist > 0, dist, 1.0)
    coeff = np.where(dist > 0, 1.0 / safe, 0.0)

    def grad_fn(g):
        w = (g + g.T) * coeff
        return ((w[:, :, None] * diff).sum(axis=1),)

    return make_result("pairwise_distance", dist, (x,), grad_fn)


_FORWARD = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "pow": power, "exp": exp,
    "log": log, "relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softmax": softmax,
    "log_softmax": log_softmax, "matmul": matmul, "bias_add": bias_add, "sum": sum,
    "mean": mean, "max": max, "reshape": reshape, "transpose": transpose, "clamp": clamp,
    "conv2d": conv2d, "avg_pool2d": avg_pool2d, "global_avg_pool": global_avg_pool,
    "upsample_nearest": upsample_nearest, "hard_sigmoid": hard_sigmoid,
    "ste_binarize": ste_binarize, "pairwise_distance": pairwise_distance,
}


def forward(op_kind: str, inputs, **attrs) -> Tensor:
    """Dispatch an op by name, e.g. ``forward("conv2d", [x, w], stride=2)``."""
    fn = _FORWARD.get(op_kind)
    if fn is None:
        raise AttrError(f"unknown op {op_kind!r}")
    try:
        return fn(*inputs, **attrs)
    except TypeError as exc:
        raise AttrError(f"{op_kind}: {exc}") from None

