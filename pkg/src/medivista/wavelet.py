"""Single-level orthonormal 2-D Haar transform.

For each 2x2 block [[a, b], [c, d]]::

    ll = (a + b + c + d) / 2      lh = (a - b + c - d) / 2
    hl = (a + b - c - d) / 2      hh = (a - b - c + d) / 2
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Function, Tensor, as_tensor, register_gradcheck


@dataclass
class WaveletSubbands:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    padding: tuple[int, int] = (0, 0)  # rows, cols appended by reflect-padding

    @property
    def shape(self) -> tuple[int, ...]:
        return self.ll.shape

    def bands(self) -> list[Tensor]:
        return [self.ll, self.lh, self.hl, self.hh]

    def energy(self) -> float:
        return float(sum(np.sum(b.data**2) for b in self.bands()))


class HaarDWT(Function):
    """(..., H, W) -> (4, ..., H/2, W/2), band order ll, lh, hl, hh."""

    name = "haar_dwt2"

    @staticmethod
    def forward(ctx, x):
        h, w = x.shape[-2:]
        ph, pw = h % 2, w % 2
        if ph or pw:
            pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
            x = np.pad(x, pad, mode="reflect")
        a = x[..., 0::2, 0::2]
        b = x[..., 0::2, 1::2]
        c = x[..., 1::2, 0::2]
        d = x[..., 1::2, 1::2]
        ctx.save((h, w), (ph, pw))
        return 0.5 * np.stack([a + b + c + d, a - b + c - d, a + b - c - d, a - b - c + d])

    @staticmethod
    def backward(ctx, g):
        (h, w), (ph, pw) = ctx.saved
        ll, lh, hl, hh = g
        out = np.empty(g.shape[1:-2] + (h + ph, w + pw))
        out[..., 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
        out[..., 0::2, 1::2] = 0.5 * (ll - lh + hl - hh)
        out[..., 1::2, 0::2] = 0.5 * (ll + lh - hl - hh)
        out[..., 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
        # fold reflect-padding back onto its source row/column
        if pw:
            out[..., :, w - 2] += out[..., :, w]
            out = out[..., :, :w]
        if ph:
            out[..., h - 2, :] += out[..., h, :]
            out = out[..., :h, :]
        return np.ascontiguousarray(out)


class HaarIDWT(Function):
    """Inverse of :class:`HaarDWT` (without padding removal)."""

    name = "haar_idwt2"

    @staticmethod
    def forward(ctx, bands):
        ll, lh, hl, hh = bands
        out = np.empty(bands.shape[1:-2] + (2 * bands.shape[-2], 2 * bands.shape[-1]))
        out[..., 0::2, 0::2] = 0.5 * (ll + lh + hl + hh)
        out[..., 0::2, 1::2] = 0.5 * (ll - lh + hl - hh)
        out[..., 1::2, 0::2] = 0.5 * (ll + lh - hl - hh)
        out[..., 1::2, 1::2] = 0.5 * (ll - lh - hl + hh)
        return out

    @staticmethod
    def backward(ctx, g):
        a = g[..., 0::2, 0::2]
        b = g[..., 0::2, 1::2]
        c = g[..., 1::2, 0::2]
        d = g[..., 1::2, 1::2]
        return 0.5 * np.stack([a + b + c + d, a - b + c - d, a + b - c - d, a - b - c + d])


def haar_dwt2_stacked(x) -> Tensor:
    x = as_tensor(x)
    if x.size == 0 or x.ndim < 2:
        raise ValueError(f"haar_dwt2: empty or non-2-D frame {x.shape}")
    if min(x.shape[-2:]) < 2:
        raise ValueError(f"haar_dwt2: frame {x.shape[-2:]} too small for a 2x2 block")
    return HaarDWT.apply(x)


def haar_dwt2(frame) -> WaveletSubbands:
    frame = as_tensor(frame)
    stacked = haar_dwt2_stacked(frame)
    h, w = frame.shape[-2:]
    return WaveletSubbands(
        ll=stacked[0], lh=stacked[1], hl=stacked[2], hh=stacked[3], padding=(h % 2, w % 2)
    )


def haar_idwt2(sb: WaveletSubbands) -> Tensor:
    bands = sb.bands()
    shapes = {b.shape for b in bands}
    if len(shapes) != 1:
        raise ValueError(f"haar_idwt2: band shapes disagree: {sorted(shapes)}")
    stacked = ops.concat([ops.reshape(b, (1,) + b.shape) for b in bands], axis=0)
    out = HaarIDWT.apply(stacked)
    ph, pw = sb.padding
    if ph or pw:
        h, w = out.shape[-2:]
        out = out[..., : h - ph, : w - pw]
    return out


def fourier_bands(frame: np.ndarray) -> np.ndarray:
    """Four half-resolution frequency bands from the FFT (ablation alternative to Haar).

    Splits the spectrum into low-pass, horizontal-, vertical- and diagonal-high
    parts, inverts each and 2x2 average-pools. Input (..., H, W), output (4, ..., H/2, W/2).
    """
    h, w = frame.shape[-2:]
    spec = np.fft.fft2(frame)
    fy = np.abs(np.fft.fftfreq(h))[:, None] >= 0.25
    fx = np.abs(np.fft.fftfreq(w))[None, :] >= 0.25
    masks = [~fy & ~fx, ~fy & fx, fy & ~fx, fy & fx]
    out = []
    for m in masks:
        band = np.real(np.fft.ifft2(spec * m))
        out.append(band.reshape(band.shape[:-2] + (h // 2, 2, w // 2, 2)).mean(axis=(-3, -1)))
    return np.stack(out)


def space_to_depth(frame: np.ndarray) -> np.ndarray:
    """The four 2x2 polyphase components: the untransformed-input baseline."""
    return np.stack([frame[..., 0::2, 0::2], frame[..., 0::2, 1::2], frame[..., 1::2, 0::2], frame[..., 1::2, 1::2]])


@register_gradcheck("haar_dwt2")
def _gc_dwt(rng):
    return haar_dwt2_stacked, [Tensor(rng.normal(size=(2, 6, 8)), requires_grad=True)]


@register_gradcheck("haar_dwt2_odd")
def _gc_dwt_odd(rng):
    return haar_dwt2_stacked, [Tensor(rng.normal(size=(5, 7)), requires_grad=True)]
