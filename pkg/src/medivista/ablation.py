"""Ablation grid: each axis is a list of labelled config variants trained on the same data and seed.

Variants start from one shared pre-trained model per backbone and decoder shape, the way
every row of a comparison table starts from the same foundation-model weights:
backbone and decoder tensors are copied where name and shape match, the backbone
is frozen, and adapters, the frequency branch and FacT cores train from scratch.
"""
from __future__ import annotations

import copy
import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .config import ModelConfig, RunConfig
from .evaluate import evaluate
from .model import MediViSTA
from .phantom import read_dataset
from .train import load_checkpoint, save_checkpoint, train_loop

Mutator = Callable[[RunConfig], None]


def _order(name: str) -> Mutator:
    def f(c):
        c.model.attention_order = name
    return f


def _kernel(kind: str, sigma: float) -> Mutator:
    def f(c):
        c.model.kernel.type = kind
        c.model.kernel.sigma = sigma
    return f


def _ffm(enabled: bool, transform: str) -> Mutator:
    def f(c):
        c.model.ffm_enabled = enabled
        c.model.ffm_transform = transform
    return f


def _rank(r: int) -> Mutator:
    def f(c):
        c.model.fact.rank = r
    return f


def _adapter(kind: str) -> Mutator:
    def f(c):
        c.model.temporal_adapter = kind
    return f


def _multiscale(on: bool) -> Mutator:
    def f(c):
        c.model.multiscale = on
    return f


def _backbone(dim: int, depth: int) -> Mutator:
    def f(c):
        c.model.embed_dim = dim
        c.model.depth = depth
    return f


# axis -> [(row label, mutator)], rows in the order the comparison tables list them
AXES: dict[str, list[tuple[str, Mutator]]] = {
    "order": [
        ("no T-F", _order("spatial_only")),
        ("T→S", _order("temporal_plain")),
        ("S→T-F", _order("spatial_first")),
        ("T-F→S", _order("temporal_first")),
    ],
    "kernel": [
        ("Gaussian σ=0.5", _kernel("gaussian", 0.5)),
        ("Gaussian σ=1.0", _kernel("gaussian", 1.0)),
        ("Bilateral σ=1.0", _kernel("bilateral", 1.0)),
        ("Laplacian σ=1.0", _kernel("laplacian", 1.0)),
    ],
    "ffm": [
        ("FFM off", _ffm(False, "wavelet")),
        ("FFM on, no transform", _ffm(True, "none")),
        ("FFM on, Fourier", _ffm(True, "fourier")),
        ("FFM on, Wavelet", _ffm(True, "wavelet")),
    ],
    "rank": [(f"r={r}", _rank(r)) for r in (4, 8, 16, 32)],
    "adapter": [
        ("SAM3D-like 3D conv", _adapter("conv3d")),
        ("Med-SA-like bifurcated", _adapter("bifurcated")),
        ("Crossframe", _adapter("crossframe")),
        ("Temporal Fusion", _adapter("fusion")),
    ],
    "fusion": [("multi-scale off", _multiscale(False)), ("multi-scale on", _multiscale(True))],
    "backbone": [
        ("ViT-B analogue (d=16)", _backbone(16, 4)),
        ("ViT-L analogue (d=24)", _backbone(24, 4)),
        ("ViT-H analogue (d=32)", _backbone(32, 4)),
    ],
}


WARM_START_PREFIXES = ("backbone.", "decoder.")


def ablation_defaults() -> RunConfig:
    """Schedule for the 8-video mini dataset.

    ``pretrain_epochs`` trains the shared model once per backbone and decoder shape;
    ``epochs`` is the per-variant frozen-backbone tuning.
    """
    cfg = RunConfig()
    cfg.train.epochs = 20
    cfg.train.pretrain_epochs = 60
    cfg.train.learning_rate = 1e-3
    return cfg


def variants(axis: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    out = []
    for label, mutate in AXES[axis]:
        cfg = copy.deepcopy(base)
        mutate(cfg)
        cfg.validate()
        out.append((label, cfg))
    return out


@dataclass
class AblationRow:
    variant: str
    dice: float
    L: float
    dice_std: float
    L_std: float
    seconds: float


# fields that shape the warm-started tensors; variants differing here get their own shared model
SHARED_FIELDS = ("embed_dim", "depth", "patch_size", "image_size", "in_channels", "mlp_ratio", "heads", "multiscale")


def backbone_key(m: ModelConfig) -> str:
    h, w = m.image_size
    return (f"d{m.embed_dim}_depth{m.depth}_p{m.patch_size}_{h}x{w}_c{m.in_channels}_mlp{m.mlp_ratio}"
            f"_h{m.heads}_ms{int(m.multiscale)}")


def pretrain_shared(cfg: RunConfig, base: RunConfig, data: str, cache: Path) -> Path:
    """Pre-train the ``base`` architecture with ``cfg``'s backbone and decoder shape; cached by key."""
    ckpt = cache / backbone_key(cfg.model)
    if (ckpt / "manifest.json").exists():
        return ckpt
    ref = copy.deepcopy(base)
    for name in SHARED_FIELDS:
        setattr(ref.model, name, getattr(cfg.model, name))
    ref.train.epochs = 0
    ref.validate()
    model = MediViSTA(ref.model, seed=ref.train.seed)
    train_loop(read_dataset(data, "train"), read_dataset(data, "val"), model, ref.train)
    return save_checkpoint(ckpt, model, extra={"epochs": ref.train.pretrain_epochs})


def warm_start(model: MediViSTA, checkpoint: str | os.PathLike) -> list[str]:
    """Copy shared tensors into ``model`` where name and shape match; returns the copied names."""
    src, _, _ = load_checkpoint(checkpoint)
    copied = []
    for name, t in src.weights.items():
        dst = model.weights.get(name)
        if name.startswith(WARM_START_PREFIXES) and dst is not None and dst.shape == t.shape:
            dst.data[...] = t.data
            copied.append(name)
    return copied


def run_variant(label: str, cfg: RunConfig, data: str, out_dir: str | None = None,
                pretrained: str | None = None) -> AblationRow:
    """Train and score one variant; with ``pretrained`` only the frozen-backbone tuning runs here."""
    t0 = time.perf_counter()
    train = read_dataset(data, "train")
    val = read_dataset(data, "val")
    test = read_dataset(data, "test") or val or train
    model = MediViSTA(cfg.model, seed=cfg.train.seed)
    tcfg = cfg.train
    if pretrained is not None:
        warm_start(model, pretrained)
        model.freeze_backbone()
        tcfg = copy.deepcopy(tcfg)
        tcfg.pretrain_epochs = 0
    train_loop(train, val, model, tcfg, out_dir)
    rep = evaluate(model, test, cfg.train.clip_len)
    s = rep.summary["endo"]
    return AblationRow(label, s["dice_mean"], s["L_mean"], s["dice_std"], s["L_std"], time.perf_counter() - t0)


def _run_packed(args):
    return run_variant(*args)


def run_axis(axis: str, data: str, out: str | os.PathLike, base: RunConfig | None = None,
             workers: int = 1) -> list[AblationRow]:
    base = base or ablation_defaults()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i, (label, cfg) in enumerate(variants(axis, base)):
        shared = None
        if cfg.train.pretrain_epochs > 0:
            shared = str(pretrain_shared(cfg, base, str(data), out / "pretrained"))
        jobs.append((label, cfg, str(data), str(out / axis / f"v{i}"), shared))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_run_packed, jobs))
    else:
        rows = [run_variant(*j) for j in jobs]
    write_table(rows, out / f"ablation_{axis}.csv")
    return rows


def write_table(rows: list[AblationRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "dice", "dice_std", "L", "L_std", "seconds"])
        for r in rows:
            w.writerow([r.variant] + [f"{v:.6g}" for v in (r.dice, r.dice_std, r.L, r.L_std, r.seconds)])
