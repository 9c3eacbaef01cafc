"""Self-attention, temporal-fusion attention and cross-branch attention.

Tokens are row vectors, so projections are right-multiplications: ``q = x @ wq``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor, register_gradcheck


@dataclass
class TemporalKernel:
    """Frame-mixing weights ``weights[..., t, tau]``; leading dims allow per-video kernels."""

    weights: np.ndarray
    sigma: float
    window: int
    normalized: bool
    kind: str = "gaussian"

    @property
    def frames(self) -> int:
        return self.weights.shape[-1]


@dataclass
class AttentionWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    w_out: Tensor | None = None

    @property
    def dim(self) -> int:
        return self.wq.shape[1]


def _check_kernel_args(T: int, sigma: float, window: int) -> None:
    if T < 1:
        raise ValueError(f"kernel needs T >= 1, got {T}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")


def _finish(w: np.ndarray, window: int, normalized: bool) -> np.ndarray:
    t = np.arange(w.shape[-1])
    w = np.where(np.abs(t[:, None] - t[None, :]) > window // 2, 0.0, w)
    if normalized:
        w = w / w.sum(axis=-1, keepdims=True)
    return w


def gaussian_kernel(T: int, sigma: float = 1.0, window: int = 5, normalized: bool = True) -> TemporalKernel:
    _check_kernel_args(T, sigma, window)
    t = np.arange(T, dtype=np.float64)
    w = np.exp(-((t[:, None] - t[None, :]) ** 2) / (2.0 * sigma**2))
    return TemporalKernel(_finish(w, window, normalized), sigma, window, normalized, "gaussian")


def laplacian_kernel(T: int, sigma: float = 1.0, window: int = 5, normalized: bool = True) -> TemporalKernel:
    _check_kernel_args(T, sigma, window)
    t = np.arange(T, dtype=np.float64)
    w = np.exp(-np.abs(t[:, None] - t[None, :]) / sigma)
    return TemporalKernel(_finish(w, window, normalized), sigma, window, normalized, "laplacian")


def bilateral_kernel(
    frame_means: np.ndarray,
    sigma: float = 1.0,
    window: int = 5,
    normalized: bool = True,
    sigma_intensity: float = 0.1,
) -> TemporalKernel:
    """Gaussian in frame distance times Gaussian in mean-intensity difference.

    ``frame_means`` is (T,) or (B, T); the result has matching leading dims.
    """
    means = np.asarray(frame_means, dtype=np.float64)
    T = means.shape[-1]
    _check_kernel_args(T, sigma, window)
    t = np.arange(T, dtype=np.float64)
    spatial = np.exp(-((t[:, None] - t[None, :]) ** 2) / (2.0 * sigma**2))
    diff = means[..., :, None] - means[..., None, :]
    w = spatial * np.exp(-(diff**2) / (2.0 * sigma_intensity**2))
    return TemporalKernel(_finish(w, window, normalized), sigma, window, normalized, "bilateral")


def first_frame_kernel(T: int) -> TemporalKernel:
    """Every frame takes its keys/values from frame 0 (cross-frame attention)."""
    w = np.zeros((T, T))
    w[:, 0] = 1.0
    return TemporalKernel(w, 1.0, 2 * T + 1, True, "first_frame")


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = ops.reshape(x, (*lead, n, heads, d // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ops.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return ops.reshape(ops.transpose(x, axes), (*lead, n, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Softmax(q k^T / sqrt(d)) v over the last two axes; d is the per-head width."""
    if heads > 1:
        if q.shape[-1] % heads:
            raise ValueError(f"attention width {q.shape[-1]} not divisible by {heads} heads")
        q, k, v = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ops.mul(ops.matmul(q, ops.swap_last(k)), scale)
    out = ops.matmul(ops.softmax(scores, axis=-1), v)
    return _merge_heads(out) if heads > 1 else out


def _project_out(a: Tensor, w: AttentionWeights) -> Tensor:
    return a if w.w_out is None else ops.matmul(a, w.w_out)


def _check_width(x: Tensor, wmat: Tensor, what: str) -> None:
    if x.shape[-1] != wmat.shape[0]:
        raise ValueError(f"{what}: feature width {x.shape[-1]} does not match projection {wmat.shape}")


def self_attention(x, w: AttentionWeights, heads: int = 1) -> Tensor:
    x = as_tensor(x)
    _check_width(x, w.wq, "self_attention")
    q = ops.matmul(x, w.wq)
    k = ops.matmul(x, w.wk)
    v = ops.matmul(x, w.wv)
    return _project_out(attend(q, k, v, heads), w)


def mix_frames(x: Tensor, kernel_weights: np.ndarray) -> Tensor:
    """out[..., t, n, :] = sum_tau phi[t, tau] * x[..., tau, n, :]."""
    *lead, T, n, d = x.shape
    flat = ops.reshape(x, (*lead, T, n * d))
    phi = np.asarray(kernel_weights)
    mixed = ops.matmul(Tensor(phi), flat)
    return ops.reshape(mixed, (*lead, T, n, d))


def temporal_fusion_attention(x, w: AttentionWeights, kernel: TemporalKernel, heads: int = 1) -> Tensor:
    """Per-frame queries attend to kernel-weighted mixtures of all frames' keys and values.

    ``x`` is (..., T, N, d).
    """
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"temporal_fusion_attention expects (..., T, N, d), got {x.shape}")
    T = x.shape[-3]
    if kernel.frames != T or kernel.weights.shape[-2] != T:
        raise ValueError(f"kernel is {kernel.weights.shape[-2:]} but clip has {T} frames")
    _check_width(x, w.wq, "temporal_fusion_attention")
    q = ops.matmul(x, w.wq)
    k = ops.matmul(x, w.wk)
    v = ops.matmul(x, w.wv)
    phi = kernel.weights
    if phi.ndim > 2:
        # per-video kernel (B, T, T) against x (B, T, N, d)
        phi = phi.reshape(phi.shape[:-2] + (1,) * (x.ndim - 3 - (phi.ndim - 2)) + phi.shape[-2:])
    k_hat = mix_frames(k, phi)
    v_hat = mix_frames(v, phi)
    return _project_out(attend(q, k_hat, v_hat, heads), w)


def temporal_attention(x, w: AttentionWeights, heads: int = 1) -> Tensor:
    """Plain attention along the time axis, independently for each token position."""
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y = self_attention(ops.transpose(x, axes), w, heads)
    return ops.transpose(y, axes)


def cross_branch_attention(f_v, f_c, w: AttentionWeights, heads: int = 1) -> Tensor:
    """Residual cross-attention: transformer tokens query CNN tokens.

    ``f_v + Softmax(q(f_v) k(f_c)^T / sqrt(d)) v(f_c)`` (then ``w_out`` if set).
    """
    f_v, f_c = as_tensor(f_v), as_tensor(f_c)
    _check_width(f_v, w.wq, "cross_branch_attention (query)")
    _check_width(f_c, w.wk, "cross_branch_attention (key)")
    q = ops.matmul(f_v, w.wq)
    k = ops.matmul(f_c, w.wk)
    v = ops.matmul(f_c, w.wv)
    update = _project_out(attend(q, k, v, heads), w)
    if update.shape[-1] != f_v.shape[-1]:
        raise ValueError(f"cross_branch_attention: update width {update.shape[-1]} != query width {f_v.shape[-1]}")
    return ops.add(f_v, update)


def random_weights(rng: np.random.Generator, d: int, dk: int | None = None, d_ctx: int | None = None,
                   with_out: bool = True, requires_grad: bool = True) -> AttentionWeights:
    dk = dk or d
    d_ctx = d_ctx or d

    def mk(*shape, fan):
        return Tensor(rng.normal(size=shape) / math.sqrt(fan), requires_grad=requires_grad)

    return AttentionWeights(
        wq=mk(d, dk, fan=d),
        wk=mk(d_ctx, dk, fan=d_ctx),
        wv=mk(d_ctx, dk, fan=d_ctx),
        w_out=mk(dk, d, fan=dk) if with_out else None,
    )


def _weights_list(w: AttentionWeights) -> list[Tensor]:
    return [w.wq, w.wk, w.wv] + ([w.w_out] if w.w_out is not None else [])


@register_gradcheck("self_attention")
def _gc_sa(rng):
    w = random_weights(rng, 4)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    return (lambda x, *ws: self_attention(x, AttentionWeights(*ws))), [x] + _weights_list(w)


@register_gradcheck("self_attention_2head")
def _gc_sa2(rng):
    w = random_weights(rng, 4)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    return (lambda x, *ws: self_attention(x, AttentionWeights(*ws), heads=2)), [x] + _weights_list(w)


@register_gradcheck("temporal_fusion_attention")
def _gc_tfa(rng):
    w = random_weights(rng, 4, dk=3)
    x = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
    k = gaussian_kernel(3, sigma=1.0, window=3)
    return (lambda x, *ws: temporal_fusion_attention(x, AttentionWeights(*ws), k)), [x] + _weights_list(w)


@register_gradcheck("temporal_attention")
def _gc_ta(rng):
    w = random_weights(rng, 4)
    x = Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
    return (lambda x, *ws: temporal_attention(x, AttentionWeights(*ws))), [x] + _weights_list(w)


@register_gradcheck("cross_branch_attention")
def _gc_cba(rng):
    w = random_weights(rng, 4, dk=3, d_ctx=5)
    fv = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    fc = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    return (lambda a, b, *ws: cross_branch_attention(a, b, AttentionWeights(*ws))), [fv, fc] + _weights_list(w)
