"""Sparse-label training: clip sampling, masked loss, augmentation, AdamW, checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import mvst, ops
from .config import ModelConfig, TrainConfig, from_dict, to_dict
from .metrics import STRUCTURES, dice, region
from .model import MediViSTA
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

DICE_SMOOTH = 1.0


@dataclass
class SparseLabels:
    masks: dict[int, np.ndarray]
    frames: int

    def __post_init__(self):
        bad = [t for t in self.masks if not 0 <= t < self.frames]
        if bad:
            raise ValueError(f"labeled frames {bad} outside clip of {self.frames}")

    @property
    def labeled_frames(self) -> list[int]:
        return sorted(self.masks)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: str | None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# ---- clip sampling ---------------------------------------------------------


def clip_indices(n_frames: int, ed_idx: int, es_idx: int, clip_len: int) -> list[int]:
    """Source-frame indices for a clip starting at ED.

    Short ED..ES spans keep reading past ES, wrapping cyclically at the end of the
    video; spans longer than the clip are subsampled evenly so both ED and ES stay in.
    """
    if n_frames < 2:
        raise ValueError(f"video needs at least 2 frames, got {n_frames}")
    if not 0 <= ed_idx < es_idx < n_frames:
        raise ValueError(f"need 0 <= ed_idx < es_idx < {n_frames}, got ed={ed_idx}, es={es_idx}")
    span = es_idx - ed_idx + 1
    if span <= clip_len:
        return [(ed_idx + i) % n_frames for i in range(clip_len)]
    return [int(round(x)) for x in np.linspace(ed_idx, es_idx, clip_len)]


def sample_clip(video: np.ndarray, ed_idx: int, es_idx: int, clip_len: int,
                labels: dict[int, np.ndarray] | None = None) -> tuple[np.ndarray, SparseLabels, list[int]]:
    """``video`` is (C, T, H, W); returns the clip, clip-local labels and source indices."""
    idx = clip_indices(video.shape[1], ed_idx, es_idx, clip_len)
    clip = video[:, idx]
    local = {}
    for j, src in enumerate(idx):
        if labels is not None and src in labels:
            local[j] = labels[src]
    return clip, SparseLabels(local, clip_len), idx


# ---- loss --------------------------------------------------------------------


def _frame_loss(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Per-frame cross-entropy + soft-Dice over (F, K, H, W); returns (F,)."""
    F, K, H, W = logits.shape
    logp = ops.log_softmax(logits, axis=1)
    ce = ops.mul(ops.sum(ops.mul(logp, onehot), axis=(1, 2, 3)), -1.0 / (H * W))
    prob = ops.softmax(logits, axis=1)
    fg = prob[:, 1:]
    g = onehot[:, 1:]
    inter = ops.sum(ops.mul(fg, g), axis=(2, 3))
    denom = ops.add(ops.sum(fg, axis=(2, 3)), g.sum(axis=(2, 3)) + DICE_SMOOTH)
    dsc = ops.div(ops.add(ops.mul(inter, 2.0), DICE_SMOOTH), denom)
    dice_loss = ops.sub(1.0, ops.mean(dsc, axis=1))
    return ops.add(ce, dice_loss)


def one_hot(masks: np.ndarray, num_classes: int) -> np.ndarray:
    """(F, H, W) ids -> (F, K, H, W) float one-hot."""
    masks = np.asarray(masks, dtype=np.int64)
    if masks.min() < 0 or masks.max() >= num_classes:
        raise ValueError(f"class ids outside [0, {num_classes})")
    return np.moveaxis(np.eye(num_classes)[masks], -1, 1)


def masked_loss(logits: Tensor, labels: SparseLabels | Sequence[SparseLabels]) -> Tensor:
    """Mean over labeled frames of (cross-entropy + soft-Dice); unlabeled frames get no gradient.

    ``logits`` is (B, K, T, H, W); ``labels`` one SparseLabels per batch item.
    """
    if isinstance(labels, SparseLabels):
        labels = [labels]
    B, K, T, H, W = logits.shape
    if len(labels) != B:
        raise ValueError(f"{len(labels)} label sets for batch of {B}")
    flat_idx, masks = [], []
    for b, lab in enumerate(labels):
        for t in lab.labeled_frames:
            flat_idx.append(b * T + t)
            masks.append(lab.masks[t])
    if not flat_idx:
        raise ValueError("no supervision in clip")
    frames = ops.reshape(ops.transpose(logits, (0, 2, 1, 3, 4)), (B * T, K, H, W))
    picked = ops.take(frames, flat_idx, axis=0)
    per_frame = _frame_loss(picked, one_hot(np.stack(masks), K))
    return ops.mean(per_frame)


def unmasked_loss(logits: Tensor, masks: np.ndarray) -> Tensor:
    """Same loss with every frame supervised; ``masks`` is (B, T, H, W)."""
    B, K, T, H, W = logits.shape
    frames = ops.reshape(ops.transpose(logits, (0, 2, 1, 3, 4)), (B * T, K, H, W))
    return ops.mean(_frame_loss(frames, one_hot(np.asarray(masks).reshape(B * T, H, W), K)))


# ---- augmentation ------------------------------------------------------------


def _zoom_about_centre(arr: np.ndarray, factor: float, order: int) -> np.ndarray:
    """Zoom the last two axes by ``factor`` about the image centre, keeping the size."""
    h, w = arr.shape[-2:]
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    matrix = np.diag([1.0 / factor, 1.0 / factor])
    offset = c - matrix @ c
    flat = arr.reshape(-1, h, w)
    out = np.stack(
        [ndimage.affine_transform(f, matrix, offset=offset, order=order, mode="nearest") for f in flat]
    )
    return out.reshape(arr.shape)


def augment(clip: np.ndarray, labels: SparseLabels, rng: np.random.Generator, cfg) -> tuple[np.ndarray, SparseLabels]:
    """Random horizontal flip, zoom and gamma, applied identically to every frame and mask."""
    masks = dict(labels.masks)
    if cfg.flip and rng.random() < 0.5:
        clip = clip[..., ::-1]
        masks = {t: m[..., ::-1] for t, m in masks.items()}
    if cfg.scale:
        factor = rng.uniform(*cfg.scale_range)
        clip = _zoom_about_centre(clip, factor, order=1)
        masks = {t: _zoom_about_centre(m.astype(np.float64), factor, order=0).astype(m.dtype) for t, m in masks.items()}
    if cfg.contrast:
        gamma = np.exp(rng.uniform(np.log(cfg.gamma_range[0]), np.log(cfg.gamma_range[1])))
        clip = np.clip(clip, 0.0, 1.0) ** gamma
    return np.ascontiguousarray(clip), SparseLabels({t: np.ascontiguousarray(m) for t, m in masks.items()}, labels.frames)


# ---- optimiser -----------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1 / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def reset(self) -> None:
        self.step_count = 0
        self.m.clear()
        self.v.clear()


# ---- checkpoints ---------------------------------------------------------------


def save_checkpoint(directory: str | os.PathLike, model: MediViSTA, optimizer: AdamW | None = None,
                    extra: dict | None = None) -> Path:
    root = Path(directory)
    (root / "params").mkdir(parents=True, exist_ok=True)
    params, sections = {}, {}
    for name, t in model.weights.items():
        fname = f"params/{name}.mvst"
        mvst.save(root / fname, t.data)
        params[name] = {"file": fname, "trainable": bool(t.requires_grad)}
        sections.setdefault(name.split(".", 1)[0], []).append(name)
    manifest = {"format": "medivista-checkpoint", "version": 1, "config": to_dict(model.cfg),
                "params": params, "sections": sections, "extra": extra or {}}
    if optimizer is not None:
        (root / "optimizer").mkdir(exist_ok=True)
        state = {}
        for name in optimizer.m:
            mvst.save(root / f"optimizer/{name}.m.mvst", optimizer.m[name])
            mvst.save(root / f"optimizer/{name}.v.mvst", optimizer.v[name])
            state[name] = {"m": f"optimizer/{name}.m.mvst", "v": f"optimizer/{name}.v.mvst"}
        manifest["optimizer"] = {"step": optimizer.step_count, "lr": optimizer.lr, "betas": list(optimizer.betas),
                                 "eps": optimizer.eps, "weight_decay": optimizer.weight_decay, "state": state}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return root


def load_checkpoint(directory: str | os.PathLike) -> tuple[MediViSTA, AdamW | None, dict]:
    root = Path(directory)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = from_dict(ModelConfig, manifest["config"])
    weights = {}
    for name, meta in manifest["params"].items():
        weights[name] = Tensor(mvst.load(root / meta["file"]), requires_grad=meta["trainable"], name=name)
    model = MediViSTA(cfg, weights)
    opt = None
    if "optimizer" in manifest:
        o = manifest["optimizer"]
        opt = AdamW(model.weights, o["lr"], o["betas"], o["eps"], o["weight_decay"])
        opt.step_count = o["step"]
        for name, files in o["state"].items():
            opt.m[name] = mvst.load(root / files["m"])
            opt.v[name] = mvst.load(root / files["v"])
    return model, opt, manifest.get("extra", {})


# ---- training loop ---------------------------------------------------------------


def keyed_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-style generator: the stream depends only on (seed, *keys)."""
    return np.random.default_rng([seed, *keys])


def predict(model: MediViSTA, clip: np.ndarray) -> np.ndarray:
    """Argmax class maps for one clip (C, T, H, W) -> (T, H, W)."""
    with no_grad():
        logits = model(Tensor(clip[None])).data[0]
    return np.argmax(logits, axis=0).astype(np.uint8)


def eval_clip(item, clip_len: int) -> tuple[np.ndarray, np.ndarray, list[int]]:
    idx = clip_indices(item.video.shape[1], item.ed_idx, item.es_idx, clip_len)
    return item.video[:, idx], item.masks[idx], idx


def validate(model: MediViSTA, items, clip_len: int, structure: str = "endo") -> float:
    if not items:
        return float("nan")
    scores = []
    for it in items:
        clip, gt, _ = eval_clip(it, clip_len)
        pred = predict(model, clip)
        ids = STRUCTURES[structure]
        scores.append(np.mean([dice(region(p, ids), region(g, ids)) for p, g in zip(pred, gt)]))
    return float(np.mean(scores))


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_val_dice: float = float("nan")
    best_epoch: int = -1
    checkpoint: str | None = None


def _labels_of(item) -> dict[int, np.ndarray]:
    return {t: item.masks[t] for t in item.labeled_frames}


def run_epoch(model: MediViSTA, opt: AdamW, items, cfg: TrainConfig, epoch: int) -> float:
    order = keyed_rng(cfg.seed, epoch).permutation(len(items))
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        batch_idx = order[start : start + cfg.batch_size]
        clips, labels = [], []
        for i in batch_idx:
            it = items[i]
            clip, lab, _ = sample_clip(it.video, it.ed_idx, it.es_idx, cfg.clip_len, _labels_of(it))
            clip, lab = augment(clip, lab, keyed_rng(cfg.seed, epoch, int(i)), cfg.augment)
            clips.append(clip)
            labels.append(lab)
        logits = model(Tensor(np.stack(clips)))
        loss = masked_loss(logits, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return float(np.mean(losses))


def train_loop(train_items, val_items, model: MediViSTA, cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Optional full pre-training (``cfg.pretrain_epochs``), then frozen-backbone tuning.

    Writes ``metrics.csv`` and the best-validation checkpoint under ``out_dir``.
    """
    cfg.validate()
    if not train_items:
        raise ValueError("train_loop: empty training set")
    if model.cfg.frames != cfg.clip_len:
        raise ValueError(f"model expects {model.cfg.frames} frames, clip_len is {cfg.clip_len}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult()
    t0 = time.perf_counter()
    best_weights = None
    best_score = -np.inf
    phases = [("pretrain", cfg.pretrain_epochs), ("finetune", cfg.epochs)]
    epoch = 0
    rows = []
    for phase, n_epochs in phases:
        if n_epochs == 0:
            continue
        if phase == "pretrain":
            model.pretrain_mode()
        elif cfg.pretrain_epochs > 0:
            model.freeze_backbone()
        opt = AdamW(model.weights, cfg.learning_rate, cfg.betas, cfg.eps, cfg.weight_decay)
        for _ in range(n_epochs):
            epoch += 1
            try:
                train_loss = run_epoch(model, opt, train_items, cfg, epoch)
                if not np.isfinite(train_loss):
                    raise NonFiniteError("training loss is not finite")
            except NonFiniteError as exc:
                ckpt = None
                if best_weights is not None:
                    model.weights = best_weights
                    if out is not None:
                        ckpt = str(save_checkpoint(out / "checkpoint", model))
                raise TrainingDiverged(f"diverged in epoch {epoch}: {exc}", ckpt) from exc
            val = validate(model, val_items, cfg.clip_len) if val_items and epoch % cfg.val_every == 0 else float("nan")
            row = {"epoch": epoch, "train_loss": train_loss, "val_dice": val,
                   "wall_seconds": round(time.perf_counter() - t0, 3)}
            rows.append(row)
            result.history.append(dict(row, phase=phase))
            log.info("epoch %d (%s) loss %.4f val_dice %.4f", epoch, phase, train_loss, val)
            if on_epoch:
                on_epoch(dict(row, phase=phase))
            # only the final phase's weights are eligible as the delivered model
            score = val if np.isfinite(val) else -train_loss
            if (phase == "finetune" or cfg.epochs == 0) and score > best_score:
                best_score = score
                result.best_val_dice = val
                result.best_epoch = epoch
                best_weights = {k: _clone(v) for k, v in model.weights.items()}
            if out is not None:
                write_metrics_csv(out / "metrics.csv", rows)
    if best_weights is not None:
        model.weights = best_weights
    if out is not None:
        result.checkpoint = str(save_checkpoint(out / "checkpoint", model, extra={
            "best_epoch": result.best_epoch, "best_val_dice": result.best_val_dice}))
    return result


def _clone(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_dice", "wall_seconds"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in w.fieldnames})
