"""Differentiable ops over :class:`~medivista.tensor.Tensor`.

Elementwise ops broadcast numpy-style; everything else is shape-strict.
"""
from __future__ import annotations

import functools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Function, Tensor, as_tensor, register_gradcheck


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _shape(x) -> tuple[int, ...]:
    return np.shape(x)


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(_shape(a), _shape(b))
        return np.add(a, b)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return (
            _unbroadcast(g, sa) if ctx.needs[0] else None,
            _unbroadcast(g, sb) if ctx.needs[1] else None,
        )


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(_shape(a), _shape(b))
        return np.subtract(a, b)

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.saved
        return (
            _unbroadcast(g, sa) if ctx.needs[0] else None,
            _unbroadcast(-g, sb) if ctx.needs[1] else None,
        )


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        ctx.save(a, b)
        return np.multiply(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return (
            _unbroadcast(g * b, _shape(a)) if ctx.needs[0] else None,
            _unbroadcast(g * a, _shape(b)) if ctx.needs[1] else None,
        )


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        if np.any(np.asarray(b) == 0):
            raise ZeroDivisionError("div: zero denominator")
        ctx.save(a, b)
        return np.divide(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        return (
            _unbroadcast(g / b, _shape(a)) if ctx.needs[0] else None,
            _unbroadcast(-g * a / (b * b), _shape(b)) if ctx.needs[1] else None,
        )


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        a = np.asarray(a)
        b = np.asarray(b)
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        ctx.save(a, b)
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.saved
        ga = gb = None
        if ctx.needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        if ctx.needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return ga, gb


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, x, shape):
        ctx.save(x.shape)
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        (shape,) = ctx.saved
        return g.reshape(shape)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, x, axes):
        ctx.save(axes)
        return np.ascontiguousarray(np.transpose(x, axes))

    @staticmethod
    def backward(ctx, g):
        (axes,) = ctx.saved
        return np.transpose(g, np.argsort(axes))


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, x, axis=None, keepdims=False):
        ctx.save(x.shape, axis, keepdims)
        return np.asarray(np.sum(x, axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        shape, axis, keepdims = ctx.saved
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, x):
        with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
            y = np.exp(x)
        ctx.save(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved
        return g * y


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, x):
        if np.any(x <= 0):
            raise ValueError("log: non-positive input")
        ctx.save(x)
        return np.log(x)

    @staticmethod
    def backward(ctx, g):
        (x,) = ctx.saved
        return g / x


class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, x, axis=-1):
        z = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / np.sum(e, axis=axis, keepdims=True)
        ctx.save(y, axis)
        return y

    @staticmethod
    def backward(ctx, g):
        y, axis = ctx.saved
        return y * (g - np.sum(g * y, axis=axis, keepdims=True))


class LogSoftmax(Function):
    name = "log_softmax"

    @staticmethod
    def forward(ctx, x, axis=-1):
        z = x - np.max(x, axis=axis, keepdims=True)
        out = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
        ctx.save(out, axis)
        return out

    @staticmethod
    def backward(ctx, g):
        out, axis = ctx.saved
        return g - np.exp(out) * np.sum(g, axis=axis, keepdims=True)


_GELU_C = math.sqrt(2.0 / math.pi)


class GELU(Function):
    """tanh approximation of GELU."""

    name = "gelu"

    @staticmethod
    def forward(ctx, x):
        x2 = x * x
        t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
        ctx.save(x, t)
        return 0.5 * x * (1.0 + t)

    @staticmethod
    def backward(ctx, g):
        x, t = ctx.saved
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


class LayerNorm(Function):
    name = "layer_norm"

    @staticmethod
    def forward(ctx, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx.save(xhat, inv, gamma, _shape(beta))
        return xhat * gamma + beta

    @staticmethod
    def backward(ctx, g):
        xhat, inv, gamma, beta_shape = ctx.saved
        gx = ggamma = gbeta = None
        if ctx.needs[0]:
            gh = g * gamma
            n = xhat.shape[-1]
            gx = inv / n * (
                n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True)
            )
        if ctx.needs[1]:
            ggamma = _unbroadcast(g * xhat, _shape(gamma))
        if ctx.needs[2]:
            gbeta = _unbroadcast(g, beta_shape)
        return gx, ggamma, gbeta


class Conv2d(Function):
    """Cross-correlation on (N, C, H, W) with weights (O, C, kh, kw), zero padding."""

    name = "conv2d"

    @staticmethod
    def forward(ctx, x, w, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
        p, s = padding, stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        kh, kw = w.shape[2:]
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise ValueError(f"conv2d: kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}")
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
        ctx.save(x.shape, xp.shape, win, w, s, p)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    @staticmethod
    def backward(ctx, g):
        xshape, xpshape, win, w, s, p = ctx.saved
        gx = gw = None
        if ctx.needs[1]:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
        if ctx.needs[0]:
            kh, kw = w.shape[2:]
            ho, wo = g.shape[2:]
            gxp = np.zeros(xpshape)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(w[:, :, i, j], g, axes=([0], [1]))  # C, N, Ho, Wo
                    gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += contrib.transpose(
                        1, 0, 2, 3
                    )
            gx = gxp[:, :, p : p + xshape[2], p : p + xshape[3]] if p else gxp
            gx = np.ascontiguousarray(gx)
        return gx, gw


class GetItem(Function):
    name = "getitem"

    @staticmethod
    def forward(ctx, x, index):
        ctx.save(x.shape, index)
        return np.ascontiguousarray(x[index])

    @staticmethod
    def backward(ctx, g):
        shape, index = ctx.saved
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return out


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *xs, axis=0):
        ctx.save([x.shape[axis] for x in xs], axis)
        return np.concatenate(xs, axis=axis)

    @staticmethod
    def backward(ctx, g):
        sizes, axis = ctx.saved
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))


# ---- functional wrappers -------------------------------------------------


def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def matmul(a, b):
    return MatMul.apply(a, b)


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes):
    return Transpose.apply(x, axes=tuple(axes))


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(x):
    return Exp.apply(x)


def log(x):
    return Log.apply(x)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(x, axis=axis)


def gelu(x):
    return GELU.apply(x)


def layer_norm(x, gamma, beta, eps=1e-5):
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def conv2d(x, w, bias=None, stride=1, padding=0):
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1)) if isinstance(bias, Tensor) else np.reshape(bias, (1, -1, 1, 1)))
    return out


def getitem(x, index):
    return GetItem.apply(x, index=index)


def take(x, indices, axis):
    index = [slice(None)] * x.ndim
    index[axis] = np.asarray(indices, dtype=np.intp)
    return getitem(x, tuple(index))


def concat(xs, axis=0):
    return Concat.apply(*xs, axis=axis)


@functools.lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic linear interpolation matrix (half-pixel centres, edge clamp)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(x, out_h: int, out_w: int):
    """Bilinear resize of the last two axes, expressed as two constant matmuls."""
    h, w = x.shape[-2:]
    y = x
    if out_h != h:
        y = matmul(Tensor(interp_matrix(h, out_h)), y)
    if out_w != w:
        y = matmul(y, Tensor(interp_matrix(w, out_w).T))
    return y


def upsample2x(x):
    h, w = x.shape[-2:]
    return resize_bilinear(x, 2 * h, 2 * w)


# ---- gradient-check registrations -----------------------------------------


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape) * scale, requires_grad=True)


@register_gradcheck("add")
def _gc_add(rng):
    return add, [_t(rng, 3, 4), _t(rng, 4)]


@register_gradcheck("sub")
def _gc_sub(rng):
    return sub, [_t(rng, 2, 3, 1), _t(rng, 3, 5)]


@register_gradcheck("mul")
def _gc_mul(rng):
    return mul, [_t(rng, 3, 4), _t(rng, 3, 1)]


@register_gradcheck("div")
def _gc_div(rng):
    b = Tensor(rng.uniform(1.0, 2.0, size=(3, 4)), requires_grad=True)
    return div, [_t(rng, 3, 4), b]


@register_gradcheck("matmul")
def _gc_matmul(rng):
    return matmul, [_t(rng, 4, 3), _t(rng, 3, 5)]


@register_gradcheck("batched_matmul")
def _gc_bmm(rng):
    return matmul, [_t(rng, 2, 4, 3), _t(rng, 3, 5)]


@register_gradcheck("reshape_transpose")
def _gc_rt(rng):
    return (lambda x: transpose(reshape(x, (3, 2, 4)), (2, 0, 1))), [_t(rng, 6, 4)]


@register_gradcheck("sum_mean")
def _gc_sum(rng):
    return (lambda x: mean(sum(x, axis=1, keepdims=True), axis=0)), [_t(rng, 3, 4, 2)]


@register_gradcheck("exp_log")
def _gc_explog(rng):
    return (lambda x: log(add(exp(x), 1.0))), [_t(rng, 5)]


@register_gradcheck("softmax")
def _gc_softmax(rng):
    return (lambda x: softmax(x, axis=-1)), [_t(rng, 8)]


@register_gradcheck("log_softmax")
def _gc_logsoftmax(rng):
    return (lambda x: log_softmax(x, axis=1)), [_t(rng, 2, 3, 4)]


@register_gradcheck("gelu")
def _gc_gelu(rng):
    return gelu, [_t(rng, 10, scale=2.0)]


@register_gradcheck("layer_norm")
def _gc_ln(rng):
    return layer_norm, [_t(rng, 3, 6), _t(rng, 6), _t(rng, 6)]


@register_gradcheck("conv2d")
def _gc_conv(rng):
    return (lambda x, w: conv2d(x, w, padding=1)), [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3)]


@register_gradcheck("conv2d_stride2")
def _gc_conv_s2(rng):
    return (lambda x, w, b: conv2d(x, w, b, stride=2, padding=1)), [
        _t(rng, 1, 2, 6, 6),
        _t(rng, 3, 2, 3, 3),
        _t(rng, 3),
    ]


@register_gradcheck("getitem_take")
def _gc_take(rng):
    return (lambda x: take(getitem(x, (slice(None), slice(1, 3))), [0, 2, 2], axis=0)), [_t(rng, 3, 4)]


@register_gradcheck("concat")
def _gc_concat(rng):
    return (lambda a, b: concat([a, b], axis=1)), [_t(rng, 2, 3), _t(rng, 2, 2)]


@register_gradcheck("resize_bilinear")
def _gc_resize(rng):
    return (lambda x: resize_bilinear(x, 6, 8)), [_t(rng, 1, 2, 3, 4)]


__all__ = [
    "add", "sub", "mul", "div", "matmul", "reshape", "transpose", "swap_last", "sum", "mean",
    "exp", "log", "softmax", "log_softmax", "gelu", "layer_norm", "conv2d", "getitem", "take",
    "concat", "resize_bilinear", "upsample2x", "interp_matrix", "as_tensor",
]
