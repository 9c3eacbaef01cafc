"""The video segmentation network.

Parameters live in a flat ``dict[str, Tensor]``; name prefixes define the groups
that freezing acts on:

* ``backbone.*``  patch embedding, positional embedding, block norms, spatial
  attention and MLP weights (frozen after pre-training)
* ``adapter.*``   temporal adapters inside each block
* ``ffm.*``       wavelet CNN branch and its cross-branch attention
* ``decoder.*``   four-stage multi-scale mask decoder
* ``fact.*``      shared FacT factors and per-layer cores
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import (
    AttentionWeights,
    TemporalKernel,
    bilateral_kernel,
    cross_branch_attention,
    first_frame_kernel,
    gaussian_kernel,
    laplacian_kernel,
    self_attention,
    temporal_attention,
    temporal_fusion_attention,
)
from .config import ModelConfig
from .fact import PROJECTIONS, FacTFactors, fact_apply, init_fact
from .tensor import Tensor, as_tensor, register_gradcheck
from .wavelet import fourier_bands, haar_dwt2_stacked, space_to_depth

Weights = dict[str, Tensor]
GROUPS = ("backbone", "adapter", "ffm", "decoder", "fact")


@dataclass
class StageFeatures:
    """Encoder outputs at the end of each of the four stages, each (B, T, N, d)."""

    stages: list[Tensor]

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError(f"expected 4 stage features, got {len(self.stages)}")
        shapes = {s.shape for s in self.stages}
        if len(shapes) != 1:
            raise ValueError(f"stage features disagree in shape: {sorted(shapes)}")


# ---- initialisation --------------------------------------------------------


def init_weights(cfg: ModelConfig, seed: int = 0) -> Weights:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, a, c = cfg.embed_dim, cfg.adapter_dim, cfg.cross_dim
    p, C = cfg.patch_size, cfg.in_channels
    hidden = cfg.mlp_ratio * d
    w: Weights = {}

    def dense(name, fan_in, *shape, scale=1.0):
        w[name] = Tensor(rng.normal(size=shape) * scale / math.sqrt(fan_in), requires_grad=True)

    def const(name, value, *shape):
        w[name] = Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)

    dense("backbone.patch.w", C * p * p, C * p * p, d)
    const("backbone.patch.b", 0.0, d)
    w["backbone.pos"] = Tensor(rng.normal(size=(cfg.num_tokens, d)) * 0.02, requires_grad=True)
    for i in range(cfg.depth):
        b = f"backbone.block{i}"
        for ln in ("ln1", "ln2"):
            const(f"{b}.{ln}.g", 1.0, d)
            const(f"{b}.{ln}.b", 0.0, d)
        for proj in ("wq", "wk", "wv", "wo"):
            dense(f"{b}.attn.{proj}", d, d, d)
        dense(f"{b}.mlp.w1", d, d, hidden)
        const(f"{b}.mlp.b1", 0.0, hidden)
        dense(f"{b}.mlp.w2", hidden, hidden, d)
        const(f"{b}.mlp.b2", 0.0, d)

        if cfg.attention_order != "spatial_only" or cfg.temporal_adapter == "bifurcated":
            ad = f"adapter.block{i}"
            const(f"{ad}.ln.g", 1.0, d)
            const(f"{ad}.ln.b", 0.0, d)
            if cfg.temporal_adapter == "conv3d":
                dense(f"{ad}.down", d, d, a)
                dense(f"{ad}.conv", 27 * a, 3, a, a, 3, 3)
                dense(f"{ad}.up", a, a, d, scale=0.5)
            else:
                for proj in ("wq", "wk", "wv"):
                    dense(f"{ad}.{proj}", d, d, a)
                dense(f"{ad}.wo", a, a, d, scale=0.5)

    if cfg.ffm_enabled:
        chans = (4 * C,) + tuple(cfg.ffm_channels)
        for s in range(4):
            dense(f"ffm.conv{s}", 9 * chans[s], chans[s + 1], chans[s], 3, 3)
            dense(f"ffm.cross{s}.wq", d, d, c)
            dense(f"ffm.cross{s}.wk", chans[s + 1], chans[s + 1], c)
            dense(f"ffm.cross{s}.wv", chans[s + 1], chans[s + 1], c)
            dense(f"ffm.cross{s}.wo", c, c, d, scale=0.5)

    widths = cfg.decoder_widths
    dense("decoder.conv0.w", d, widths[0], d, 1, 1)
    const("decoder.conv0.b", 0.0, widths[0])
    for k in range(1, 4):
        if cfg.multiscale:
            dense(f"decoder.skip{k}.w", d, widths[k - 1], d, 1, 1)
        dense(f"decoder.conv{k}.w", 9 * widths[k - 1], widths[k], widths[k - 1], 3, 3)
        const(f"decoder.conv{k}.b", 0.0, widths[k])
    dense("decoder.head.w", widths[3], cfg.num_classes, widths[3], 1, 1)
    const("decoder.head.b", 0.0, cfg.num_classes)

    if cfg.fact.enabled:
        factors = init_fact(d, cfg.fact.rank, cfg.depth, rng, shared=cfg.fact.shared)
        w.update(factors.tensors())
    for name, t in w.items():
        t.name = name
    return w


def fact_factors(cfg: ModelConfig, w: Weights) -> FacTFactors | None:
    if not cfg.fact.enabled:
        return None
    if cfg.fact.shared:
        u, v = w["fact.u"], w["fact.v"]
    else:
        u = {p: w[f"fact.u.{p}"] for p in PROJECTIONS}
        v = {p: w[f"fact.v.{p}"] for p in PROJECTIONS}
    sigmas = {(i, p): w[f"fact.sigma.{i}.{p}"] for i in range(cfg.depth) for p in PROJECTIONS}
    return FacTFactors(u=u, v=v, sigmas=sigmas)


# ---- encoder ---------------------------------------------------------------


def patch_embed(video, cfg: ModelConfig, w: Weights) -> Tensor:
    """(B, C, T, H, W) -> (B, T, N, d): non-overlapping patches, linear projection, positions."""
    video = as_tensor(video)
    B, C, T, H, W = video.shape
    p = cfg.patch_size
    if H % p or W % p:
        raise ValueError(f"frame {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    x = ops.reshape(video, (B, C, T, gh, p, gw, p))
    x = ops.transpose(x, (0, 2, 3, 5, 1, 4, 6))
    x = ops.reshape(x, (B, T, gh * gw, C * p * p))
    x = ops.add(ops.matmul(x, w["backbone.patch.w"]), w["backbone.patch.b"])
    pos = w["backbone.pos"]
    if pos.shape[0] != gh * gw:
        raise ValueError(f"positional embedding has {pos.shape[0]} tokens, frame has {gh * gw}")
    return ops.add(x, pos)


def ffm_inputs(frames: np.ndarray, transform: str) -> Tensor:
    """(N, C, H, W) frames -> (N, 4C, H/2, W/2) frequency sub-bands, channel-concatenated."""
    if transform == "wavelet":
        bands = haar_dwt2_stacked(Tensor(frames)).data
    elif transform == "fourier":
        bands = fourier_bands(frames)
    elif transform == "none":
        bands = space_to_depth(frames)
    else:
        raise ValueError(f"unknown FFM transform {transform!r}")
    # (4, N, C, h, w) -> (N, 4C, h, w)
    n, c = frames.shape[:2]
    out = np.ascontiguousarray(np.transpose(bands, (1, 0, 2, 3, 4))).reshape(n, 4 * c, *bands.shape[-2:])
    return Tensor(out)


def ffm_branch(frames, cfg: ModelConfig, w: Weights) -> list[Tensor]:
    """Frequency CNN branch: sub-bands -> four stride-2 conv + GELU stages (bias-free).

    ``frames`` is (N, C, H, W) or a single (C, H, W) frame; returns four (N, c_s, h_s, w_s) maps.
    """
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[-1] % 2 or arr.shape[-2] % 2:
        raise ValueError(f"FFM needs even frame size, got {arr.shape[-2:]}")
    x = ffm_inputs(arr, cfg.ffm_transform)
    feats = []
    for s in range(4):
        x = ops.gelu(ops.conv2d(x, w[f"ffm.conv{s}"], stride=2, padding=1))
        feats.append(x)
    return feats


def _block_weights(w: Weights, i: int) -> dict[str, Tensor]:
    prefix = f"backbone.block{i}."
    return {k[len(prefix):]: v for k, v in w.items() if k.startswith(prefix)}


def _spatial_attention(x: Tensor, cfg: ModelConfig, w: Weights, i: int, factors: FacTFactors | None) -> Tensor:
    bw = _block_weights(w, i)
    wq, wv = bw["attn.wq"], bw["attn.wv"]
    if factors is not None:
        wq = fact_apply(wq, factors, i, "query")
        wv = fact_apply(wv, factors, i, "value")
    h = ops.layer_norm(x, bw["ln1.g"], bw["ln1.b"])
    return self_attention(h, AttentionWeights(wq, bw["attn.wk"], wv, bw["attn.wo"]), heads=cfg.heads)


def _mlp(x: Tensor, w: Weights, i: int) -> Tensor:
    bw = _block_weights(w, i)
    h = ops.layer_norm(x, bw["ln2.g"], bw["ln2.b"])
    h = ops.gelu(ops.add(ops.matmul(h, bw["mlp.w1"]), bw["mlp.b1"]))
    return ops.add(ops.matmul(h, bw["mlp.w2"]), bw["mlp.b2"])


def make_kernel(cfg: ModelConfig, video: np.ndarray) -> TemporalKernel:
    T = video.shape[2]
    k = cfg.kernel
    if cfg.temporal_adapter == "crossframe":
        return first_frame_kernel(T)
    if k.type == "gaussian":
        return gaussian_kernel(T, k.sigma, k.window, k.normalized)
    if k.type == "laplacian":
        return laplacian_kernel(T, k.sigma, k.window, k.normalized)
    means = video.mean(axis=(1, 3, 4))  # (B, T)
    return bilateral_kernel(means, k.sigma, k.window, k.normalized, k.sigma_intensity)


def _conv3d_adapter(h: Tensor, cfg: ModelConfig, w: Weights, i: int) -> Tensor:
    ad = f"adapter.block{i}"
    B, T, N, _ = h.shape
    gh, gw = cfg.grid
    a = cfg.adapter_dim
    z = ops.matmul(h, w[f"{ad}.down"])  # B, T, N, a
    z = ops.reshape(ops.transpose(z, (0, 1, 3, 2)), (B, T, a, gh, gw))
    zero = Tensor(np.zeros((B, 1, a, gh, gw)))
    shifted = [
        ops.concat([zero, z[:, :-1]], axis=1) if T > 1 else zero,  # previous frame
        z,
        ops.concat([z[:, 1:], zero], axis=1) if T > 1 else zero,  # next frame
    ]
    kern = w[f"{ad}.conv"]
    out = None
    for dt, zz in enumerate(shifted):
        y = ops.conv2d(ops.reshape(zz, (B * T, a, gh, gw)), kern[dt], padding=1)
        out = y if out is None else ops.add(out, y)
    out = ops.gelu(out)
    out = ops.transpose(ops.reshape(out, (B, T, a, N)), (0, 1, 3, 2))
    return ops.matmul(out, w[f"{ad}.up"])


def _temporal_adapter(x: Tensor, cfg: ModelConfig, w: Weights, i: int, kernel: TemporalKernel, plain: bool) -> Tensor:
    ad = f"adapter.block{i}"
    h = ops.layer_norm(x, w[f"{ad}.ln.g"], w[f"{ad}.ln.b"])
    if cfg.temporal_adapter == "conv3d":
        return _conv3d_adapter(h, cfg, w, i)
    aw = AttentionWeights(w[f"{ad}.wq"], w[f"{ad}.wk"], w[f"{ad}.wv"], w[f"{ad}.wo"])
    if plain or cfg.temporal_adapter == "bifurcated":
        return temporal_attention(h, aw)
    return temporal_fusion_attention(h, aw, kernel)


def transformer_block(x: Tensor, cfg: ModelConfig, w: Weights, i: int, kernel: TemporalKernel,
                      factors: FacTFactors | None) -> Tensor:
    order = cfg.attention_order
    if x.shape[1] == 1:
        # a single frame carries no temporal context: the temporal adapter is skipped
        order = "spatial_only"
    if cfg.temporal_adapter == "bifurcated" and order != "spatial_only":
        # spatial and temporal branches in parallel on the same input
        x = ops.add(x, ops.add(_spatial_attention(x, cfg, w, i, factors),
                               _temporal_adapter(x, cfg, w, i, kernel, plain=True)))
    elif order in ("temporal_first", "temporal_plain"):
        x = ops.add(x, _temporal_adapter(x, cfg, w, i, kernel, plain=order == "temporal_plain"))
        x = ops.add(x, _spatial_attention(x, cfg, w, i, factors))
    elif order == "spatial_first":
        x = ops.add(x, _spatial_attention(x, cfg, w, i, factors))
        x = ops.add(x, _temporal_adapter(x, cfg, w, i, kernel, plain=False))
    else:  # spatial_only
        x = ops.add(x, _spatial_attention(x, cfg, w, i, factors))
    return ops.add(x, _mlp(x, w, i))


def encoder_forward(video, cfg: ModelConfig, w: Weights) -> StageFeatures:
    video = as_tensor(video)
    B, C, T, H, W = video.shape
    if (H, W) != tuple(cfg.image_size) or C != cfg.in_channels:
        raise ValueError(f"video {video.shape} does not match config image {cfg.image_size}, C={cfg.in_channels}")
    x = patch_embed(video, cfg, w)
    kernel = make_kernel(cfg, video.data)
    factors = fact_factors(cfg, w)
    ffm = None
    if cfg.ffm_enabled:
        frames = np.ascontiguousarray(np.transpose(video.data, (0, 2, 1, 3, 4))).reshape(B * T, C, H, W)
        ffm = ffm_branch(frames, cfg, w)
    per_stage = cfg.depth // 4
    stages = []
    for i in range(cfg.depth):
        x = transformer_block(x, cfg, w, i, kernel, factors)
        if (i + 1) % per_stage == 0:
            s = (i + 1) // per_stage - 1
            if ffm is not None:
                f = ffm[s]
                n, ch, fh, fw = f.shape
                f_tok = ops.reshape(ops.transpose(ops.reshape(f, (B, T, ch, fh * fw)), (0, 1, 3, 2)), (B, T, fh * fw, ch))
                cw = AttentionWeights(w[f"ffm.cross{s}.wq"], w[f"ffm.cross{s}.wk"], w[f"ffm.cross{s}.wv"], w[f"ffm.cross{s}.wo"])
                x = cross_branch_attention(x, f_tok, cw)
            stages.append(x)
    return StageFeatures(stages)


# ---- decoder ---------------------------------------------------------------


def _to_grid(x: Tensor, cfg: ModelConfig) -> Tensor:
    B, T, N, d = x.shape
    gh, gw = cfg.grid
    return ops.reshape(ops.transpose(x, (0, 1, 3, 2)), (B * T, d, gh, gw))


def decoder_forward(stages: StageFeatures, cfg: ModelConfig, w: Weights) -> Tensor:
    """Progressive upsampling from the deepest stage, adding projected shallower stages.

    Returns logits (B, num_classes, T, H, W).
    """
    if not isinstance(stages, StageFeatures):
        stages = StageFeatures(list(stages))
    B, T = stages.stages[0].shape[:2]
    H, W = cfg.image_size
    n_up = int(round(math.log2(cfg.patch_size)))
    grids = [_to_grid(s, cfg) for s in stages.stages]
    y = ops.gelu(ops.conv2d(grids[3], w["decoder.conv0.w"], w["decoder.conv0.b"]))
    if n_up == 4:
        y = ops.upsample2x(y)
    for k in range(1, 4):
        if k >= 4 - n_up:
            y = ops.upsample2x(y)
        if cfg.multiscale:
            skip = ops.conv2d(grids[3 - k], w[f"decoder.skip{k}.w"])
            y = ops.add(y, ops.resize_bilinear(skip, *y.shape[-2:]))
        y = ops.gelu(ops.conv2d(y, w[f"decoder.conv{k}.w"], w[f"decoder.conv{k}.b"], padding=1))
    if y.shape[-2:] != (H, W):
        raise RuntimeError(f"decoder produced {y.shape[-2:]}, expected {(H, W)}")
    logits = ops.conv2d(y, w["decoder.head.w"], w["decoder.head.b"])
    K = cfg.num_classes
    return ops.transpose(ops.reshape(logits, (B, T, K, H, W)), (0, 2, 1, 3, 4))


def check_normalized(video: np.ndarray, tol: float = 1e-6) -> None:
    lo, hi = float(np.min(video)), float(np.max(video))
    if lo < -tol or hi > 1 + tol:
        raise ValueError(f"video must be min-max normalized to [0, 1]; range is [{lo:.4g}, {hi:.4g}]")


def medivista_forward(video, cfg: ModelConfig, w: Weights) -> Tensor:
    video = as_tensor(video)
    check_normalized(video.data)
    return decoder_forward(encoder_forward(video, cfg, w), cfg, w)


# ---- model wrapper ---------------------------------------------------------


class MediViSTA:
    """Config plus weights, with group-wise freezing."""

    def __init__(self, cfg: ModelConfig, weights: Weights | None = None, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.weights = weights if weights is not None else init_weights(cfg, seed)

    def __call__(self, video) -> Tensor:
        return medivista_forward(video, self.cfg, self.weights)

    def parameters(self) -> Weights:
        return self.weights

    def trainable(self) -> Weights:
        return {k: v for k, v in self.weights.items() if v.requires_grad}

    def group(self, name: str) -> str:
        return name.split(".", 1)[0]

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for k, v in self.weights.items():
            v.requires_grad = self.group(k) in groups
            if not v.requires_grad:
                v.grad = None

    def freeze_backbone(self) -> None:
        self.set_trainable([g for g in GROUPS if g != "backbone"])

    def pretrain_mode(self) -> None:
        """Everything but FacT trains; FacT stays at its zero-core start."""
        self.set_trainable([g for g in GROUPS if g != "fact"])

    def unfreeze_all(self) -> None:
        self.set_trainable(GROUPS)

    def zero_grad(self) -> None:
        for v in self.weights.values():
            v.grad = None


@register_gradcheck("medivista_forward")
def _gc_model(rng):
    cfg = ModelConfig()
    w = init_weights(cfg, seed=int(rng.integers(1 << 31)))
    core = w["fact.sigma.1.query"]
    core.data[:] = rng.normal(size=core.shape) * 0.1
    video = Tensor(rng.uniform(size=(1, 1, cfg.frames, *cfg.image_size)))
    return (lambda v: medivista_forward(v, cfg, w)), [video], {"tol": 1e-4, "wrt": [core]}
