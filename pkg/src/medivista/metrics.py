"""Segmentation and clinical metrics: Dice, Hausdorff, ASSD, temporal consistency,
Simpson biplane volumes, ejection fraction and Pearson correlation."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

# structure name -> class ids making up its region
STRUCTURES = {"endo": (1,), "epi": (1, 2), "la": (3,)}
EF_RISK_THRESHOLD = 45.0
RESAMPLE_POINTS = 32


class MetricError(ValueError):
    pass


@dataclass
class MaskSequence:
    masks: np.ndarray  # (T, H, W) class ids
    spacing: float = 1.0
    num_classes: int | None = None

    def __post_init__(self):
        self.masks = np.asarray(self.masks)
        if self.spacing <= 0:
            raise MetricError(f"spacing must be positive, got {self.spacing}")
        if self.num_classes is not None and self.masks.size and (
            self.masks.min() < 0 or self.masks.max() >= self.num_classes
        ):
            raise MetricError(f"class ids outside [0, {self.num_classes})")


@dataclass
class VolumePair:
    edv: float
    esv: float

    def __post_init__(self):
        if self.esv < 0:
            raise MetricError(f"ESV must be non-negative, got {self.esv}")
        if self.edv > 0 and self.esv > self.edv:
            warnings.warn(f"ESV {self.esv:.3f} exceeds EDV {self.edv:.3f}", stacklevel=3)


def region(masks: np.ndarray, class_ids: int | Iterable[int]) -> np.ndarray:
    ids = (class_ids,) if np.isscalar(class_ids) else tuple(class_ids)
    return np.isin(masks, ids)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise MetricError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """(K, 2) row/col coordinates of foreground pixels with a background 4-neighbour.

    Pixels outside the image count as background.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def _min_dists(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """For each point of ``a`` the distance to its nearest point of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        block = a[s : s + chunk]
        dy = block[:, None, 0] - b[None, :, 0]
        dx = block[:, None, 1] - b[None, :, 1]
        out[s : s + chunk] = np.sqrt(dy * dy + dx * dx).min(axis=1)
    return out


def _check_points(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("no boundary: distance metrics need non-empty point sets")
    return a, b


def hausdorff(pred_pts, gt_pts, spacing: float = 1.0) -> float:
    a, b = _check_points(pred_pts, gt_pts)
    return float(max(_min_dists(a, b).max(), _min_dists(b, a).max()) * spacing)


def assd(pred_pts, gt_pts, spacing: float = 1.0) -> float:
    a, b = _check_points(pred_pts, gt_pts)
    d = np.concatenate([_min_dists(a, b), _min_dists(b, a)])
    # correctly rounded sum, independent of summation order
    return math.fsum(d) / len(d) * spacing


def area_curve(masks: np.ndarray, class_ids) -> np.ndarray:
    return region(masks, class_ids).reshape(len(masks), -1).sum(axis=1).astype(np.float64)


def temporal_consistency(seq: MaskSequence | np.ndarray, class_id, points: int = RESAMPLE_POINTS) -> float:
    """Mean |second difference| of the max-normalised area curve on a unit time axis.

    The curve is normalised by its maximum, placed on t in [0, 1] and linearly
    resampled to ``points`` samples before differencing.
    """
    masks = seq.masks if isinstance(seq, MaskSequence) else np.asarray(seq)
    if len(masks) < 3:
        raise MetricError(f"temporal consistency needs at least 3 frames, got {len(masks)}")
    areas = area_curve(masks, class_id)
    return temporal_consistency_from_areas(areas, points)


def temporal_consistency_from_areas(areas: Sequence[float], points: int = RESAMPLE_POINTS) -> float:
    areas = np.asarray(areas, dtype=np.float64)
    if len(areas) < 3:
        raise MetricError(f"temporal consistency needs at least 3 frames, got {len(areas)}")
    peak = areas.max()
    if peak <= 0:
        raise MetricError("structure absent in every frame")
    norm = areas / peak
    t_src = np.linspace(0.0, 1.0, len(areas))
    curve = np.interp(np.linspace(0.0, 1.0, points), t_src, norm)
    second = curve[2:] + curve[:-2] - 2.0 * curve[1:-1]
    return float(np.mean(np.abs(second)))


def simpson_biplane(diam_a: Sequence[float], diam_b: Sequence[float], long_axis: float,
                    n: int | None = None, units: str = "ml") -> float:
    """Method of disks: V = (pi/4) * sum(a_i * b_i) * (L / n). Inputs in mm."""
    a = np.asarray(diam_a, dtype=np.float64)
    b = np.asarray(diam_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError(f"diameter lists differ: {a.shape} vs {b.shape}")
    n = len(a) if n is None else n
    if n < 1 or n != len(a):
        raise MetricError(f"need n >= 1 diameters matching n, got n={n}, len={len(a)}")
    vol_mm3 = math.pi / 4.0 * float(np.sum(a * b)) * (long_axis / n)
    if units == "mm3":
        return vol_mm3
    if units == "ml":
        return vol_mm3 / 1000.0
    raise MetricError(f"unknown units {units!r}")


def disk_diameters(mask: np.ndarray, n: int = 20, spacing: float = 1.0) -> tuple[np.ndarray, float]:
    """Slice a 2-D region perpendicular to its principal axis into ``n`` disks.

    Returns (diameters in mm, long-axis length in mm). The width profile is
    measured on unit-thickness slabs along the axis and linearly interpolated
    at the disk centres.
    """
    pts = np.argwhere(np.asarray(mask, dtype=bool)).astype(np.float64)
    if len(pts) == 0:
        return np.zeros(n), 0.0
    centred = pts - pts.mean(axis=0)
    if len(pts) > 1:
        evals, evecs = np.linalg.eigh(centred.T @ centred)
        axis = evecs[:, np.argmax(evals)]
    else:
        axis = np.array([1.0, 0.0])
    proj = centred @ axis
    lo, hi = proj.min() - 0.5, proj.max() + 0.5
    length = hi - lo
    n_bins = max(int(np.ceil(length - 1e-9)), 1)
    idx = np.clip(np.floor(proj - lo).astype(int), 0, n_bins - 1)
    widths = np.bincount(idx, minlength=n_bins).astype(np.float64)
    centres = lo + np.arange(n_bins) + 0.5
    disk_pos = lo + (np.arange(n) + 0.5) * (length / n)
    return np.interp(disk_pos, centres, widths) * spacing, length * spacing


def mask_volume(mask: np.ndarray, spacing: float = 1.0, n: int = 20, mask_b: np.ndarray | None = None) -> float:
    """Volume (ml) from one view (rotational symmetry) or two orthogonal views."""
    da, la = disk_diameters(mask, n, spacing)
    if mask_b is None:
        db, lb = da, la
    else:
        db, lb = disk_diameters(mask_b, n, spacing)
    return simpson_biplane(da, db, min(la, lb) if mask_b is not None else la, n)


def ejection_fraction(v: VolumePair) -> float:
    if v.edv <= 0:
        raise MetricError(f"EDV must be positive, got {v.edv}")
    return (v.edv - v.esv) / v.edv * 100.0


def ef_risk(ef: float) -> bool:
    """True when EF falls below the pathological-risk threshold."""
    return ef < EF_RISK_THRESHOLD


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise MetricError("pearson needs two equal-length sequences of at least 2 values")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        raise MetricError("undefined correlation: constant input")
    return float(np.clip(np.sum(xc * yc) / (sx * sy), -1.0, 1.0))


def structure_metrics(pred: np.ndarray, gt: np.ndarray, class_ids, spacing: float = 1.0) -> dict:
    """Per-video Dice / dH / dA averaged over frames, plus L of both sequences."""
    dices, dhs, das = [], [], []
    for p, g in zip(pred, gt):
        pm, gm = region(p, class_ids), region(g, class_ids)
        dices.append(dice(pm, gm))
        bp, bg = boundary(pm), boundary(gm)
        if len(bp) and len(bg):
            dhs.append(hausdorff(bp, bg, spacing))
            das.append(assd(bp, bg, spacing))
    out = {
        "dice": float(np.mean(dices)),
        "dh_mm": float(np.mean(dhs)) if dhs else float("nan"),
        "da_mm": float(np.mean(das)) if das else float("nan"),
    }
    out["L"] = _safe_l(pred, class_ids)
    out["L_gt"] = _safe_l(gt, class_ids)
    return out


def _safe_l(masks, class_ids) -> float:
    try:
        return temporal_consistency(masks, class_ids)
    except MetricError:
        return float("nan")
