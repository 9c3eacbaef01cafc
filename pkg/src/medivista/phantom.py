"""Synthetic beating-chamber echo phantom.

An elliptical blood pool (class 1, "endo") inside a myocardial ring (class 2,
"epi" annulus) contracts as ``s(t) = 1 - (e/2)(1 - cos(2 pi t / T))``; an
optional atrial blob (class 3) swells in antiphase. Intensities are a smoothed
tissue map times log-normal speckle plus sensor noise, min-max normalised.

The chamber is a prolate ellipsoid of revolution about its (vertical) long axis,
so volumes and ejection fraction follow in closed form from the semi-axes and e.
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import mvst

ENDO, EPI_RING, LA = 1, 2, 3


@dataclass
class PhantomParams:
    frames: int = 14
    size: tuple[int, int] = (64, 64)
    eject: float = 0.4
    semi_long: float = 20.0  # px, endo at end-diastole
    semi_short: float = 12.0
    wall: float = 5.0
    center: tuple[float, float] = (30.0, 32.0)
    la: bool = False
    la_radius: float = 5.0
    blood: float = 0.12
    myocardium: float = 0.75
    tissue: float = 0.35
    blur: float = 1.0
    speckle_sigma: float = 0.3
    speckle_corr: float = 0.7
    noise_sigma: float = 0.03
    spacing: float = 1.0  # mm per pixel

    def validate(self) -> None:
        h, w = self.size
        if self.frames < 4:
            raise ValueError(f"phantom needs at least 4 frames, got {self.frames}")
        if h % 2 or w % 2 or h <= 0 or w <= 0:
            raise ValueError(f"phantom size must be positive and even, got {h}x{w}")
        if not 0.0 <= self.eject < 1.0:
            raise ValueError(f"eject must lie in [0, 1), got {self.eject}")
        if self.semi_long <= 0 or self.semi_short <= 0 or self.wall < 0:
            raise ValueError("semi-axes must be positive and wall non-negative")
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")


@dataclass
class VolumePair:
    edv: float  # ml
    esv: float

    @property
    def ef(self) -> float:
        return (self.edv - self.esv) / self.edv * 100.0


@dataclass
class PhantomRecord:
    video: np.ndarray  # (1, T, H, W) in [0, 1]
    masks: np.ndarray  # (T, H, W) uint8 class ids, every frame
    ed_idx: int
    es_idx: int
    labeled_frames: list[int]
    true_area: dict[int, np.ndarray]  # class -> analytic area per frame (px)
    volumes: VolumePair
    params: PhantomParams
    id: str = ""

    @property
    def labels(self) -> dict[int, np.ndarray]:
        return {t: self.masks[t] for t in self.labeled_frames}


def scale_curve(t: np.ndarray, frames: int, eject: float) -> np.ndarray:
    return 1.0 - 0.5 * eject * (1.0 - np.cos(2.0 * np.pi * t / frames))


def ellipsoid_volume_ml(semi_long: float, semi_short: float, spacing: float) -> float:
    return 4.0 / 3.0 * math.pi * semi_long * semi_short**2 * spacing**3 / 1000.0


def closed_form_ef(eject: float) -> float:
    """EF (%) of a chamber whose three semi-axes all scale by 1 - e at end-systole."""
    return (1.0 - (1.0 - eject) ** 3) * 100.0


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _speckle(rng: np.random.Generator, shape, sigma: float, corr: float) -> np.ndarray:
    g = rng.standard_normal(shape)
    if corr > 0:
        g = ndimage.gaussian_filter(g, sigma=(0, corr, corr))
        g /= g.std() + 1e-12
    return np.exp(sigma * g - 0.5 * sigma**2)


def generate_phantom(params: PhantomParams | None = None, seed: int = 0) -> PhantomRecord:
    p = params or PhantomParams()
    p.validate()
    T, (H, W) = p.frames, p.size
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)
    s = scale_curve(t, T, p.eject)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.0
    cy, cx = p.center

    masks = np.zeros((T, H, W), dtype=np.uint8)
    la_cy = cy + p.semi_long + p.wall + p.la_radius + 1.0
    la_r = p.la_radius * (1.0 + 0.6 * (1.0 - s))
    for i in range(T):
        ry, rx = p.semi_long * s[i], p.semi_short * s[i]
        outer = _ellipse(yy, xx, cy, cx, ry + p.wall, rx + p.wall)
        inner = _ellipse(yy, xx, cy, cx, ry, rx)
        masks[i][outer] = EPI_RING
        masks[i][inner] = ENDO
        if p.la:
            masks[i][_ellipse(yy, xx, la_cy, cx, la_r[i], la_r[i]) & ~outer] = LA

    ry, rx = p.semi_long * s, p.semi_short * s
    true_area = {
        ENDO: np.pi * ry * rx,
        EPI_RING: np.pi * (ry + p.wall) * (rx + p.wall) - np.pi * ry * rx,
    }
    if p.la:
        true_area[LA] = np.pi * la_r**2

    tissue = np.full((T, H, W), p.tissue)
    tissue[masks == EPI_RING] = p.myocardium
    tissue[masks == ENDO] = p.blood
    tissue[masks == LA] = p.blood
    if p.blur > 0:
        tissue = ndimage.gaussian_filter(tissue, sigma=(0, p.blur, p.blur))
    img = tissue * _speckle(rng, (T, H, W), p.speckle_sigma, p.speckle_corr)
    img = img + rng.normal(scale=p.noise_sigma, size=img.shape)
    img = (img - img.min()) / (img.max() - img.min())

    ed_idx, es_idx = 0, T // 2
    volumes = VolumePair(
        edv=ellipsoid_volume_ml(p.semi_long, p.semi_short, p.spacing),
        esv=ellipsoid_volume_ml(p.semi_long * s[es_idx], p.semi_short * s[es_idx], p.spacing),
    )
    return PhantomRecord(
        video=img[None],
        masks=masks,
        ed_idx=ed_idx,
        es_idx=es_idx,
        labeled_frames=[ed_idx, es_idx],
        true_area=true_area,
        volumes=volumes,
        params=p,
    )


def random_params(rng: np.random.Generator, base: PhantomParams | None = None,
                  eject_range: tuple[float, float] = (0.25, 0.55)) -> PhantomParams:
    """Per-record geometry jitter around ``base`` (axes, centre, ejection)."""
    base = base or PhantomParams()
    h, w = base.size
    k = min(h, w) / 64.0
    return dataclasses.replace(
        base,
        eject=float(rng.uniform(*eject_range)),
        semi_long=float(rng.uniform(17.0, 22.0) * k),
        semi_short=float(rng.uniform(10.0, 13.0) * k),
        wall=float(rng.uniform(4.0, 6.0) * k),
        center=(float(h * 0.47 + rng.uniform(-2, 2) * k), float(w * 0.5 + rng.uniform(-3, 3) * k)),
    )


def make_records(count: int, seed: int = 0, base: PhantomParams | None = None,
                 eject_range: tuple[float, float] | None = (0.25, 0.55)) -> list[PhantomRecord]:
    """``count`` phantoms with keyed per-record RNG; fixed geometry if eject_range is None."""
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        params = random_params(rng, base, eject_range) if eject_range is not None else (base or PhantomParams())
        rec = generate_phantom(params, seed=int(rng.integers(1 << 31)))
        rec.id = f"phantom_{i:04d}"
        out.append(rec)
    return out


def split_tags(n: int, ratios=(0.64, 0.16, 0.20), seed: int = 0) -> list[str]:
    if n < 1:
        raise ValueError("need at least one record to split")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    tags = [""] * n
    for rank, idx in enumerate(order):
        tags[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return tags


def write_dataset(records: list[PhantomRecord], directory: str | os.PathLike,
                  ratios=(0.64, 0.16, 0.20), seed: int = 0) -> dict:
    if not records:
        raise ValueError("write_dataset: no records")
    root = Path(directory)
    try:
        (root / "videos").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    tags = split_tags(len(records), ratios, seed)
    entries = []
    for i, (rec, tag) in enumerate(zip(records, tags)):
        rid = rec.id or f"phantom_{i:04d}"
        mvst.save(root / "videos" / f"{rid}.mvst", rec.video)
        mvst.save(root / "masks" / f"{rid}.mvst", rec.masks.astype(np.uint8))
        entries.append(
            {
                "id": rid,
                "video": f"videos/{rid}.mvst",
                "mask": f"masks/{rid}.mvst",
                "ed_idx": rec.ed_idx,
                "es_idx": rec.es_idx,
                "labeled_frames": list(rec.labeled_frames),
                "spacing": rec.params.spacing,
                "eject": rec.params.eject,
                "true_volumes": {"edv": rec.volumes.edv, "esv": rec.volumes.esv, "ef": rec.volumes.ef},
                "split": tag,
                "params": _jsonable(dataclasses.asdict(rec.params)),
            }
        )
    manifest = {"format": "medivista-phantom", "version": 1, "count": len(entries), "entries": entries}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


@dataclass
class DatasetItem:
    id: str
    video: np.ndarray
    masks: np.ndarray
    ed_idx: int
    es_idx: int
    labeled_frames: list[int]
    spacing: float
    split: str
    true_volumes: dict | None = None
    meta: dict = field(default_factory=dict)


def read_manifest(directory: str | os.PathLike) -> dict:
    with open(Path(directory) / "manifest.json") as fh:
        return json.load(fh)


def read_dataset(directory: str | os.PathLike, split: str | None = None) -> list[DatasetItem]:
    root = Path(directory)
    manifest = read_manifest(root)
    items = []
    for e in manifest["entries"]:
        if split is not None and e["split"] != split:
            continue
        items.append(
            DatasetItem(
                id=e["id"],
                video=mvst.load(root / e["video"]),
                masks=mvst.load(root / e["mask"]),
                ed_idx=e["ed_idx"],
                es_idx=e["es_idx"],
                labeled_frames=list(e["labeled_frames"]),
                spacing=e["spacing"],
                split=e["split"],
                true_volumes=e.get("true_volumes"),
                meta=e,
            )
        )
    return items
