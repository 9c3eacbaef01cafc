"""Evaluation pipeline: per-video structure metrics, volumes, EF and Pearson block."""
from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .metrics import (STRUCTURES, MetricError, VolumePair, ef_risk, ejection_fraction, mask_volume,
                      pearson, region, structure_metrics)
from .model import MediViSTA
from .train import eval_clip, predict

ROW_FIELDS = ["video_id", "structure", "dice", "dh_mm", "da_mm", "L", "L_gt"]


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    volumes: list[dict] = field(default_factory=list)
    pearson: dict[str, float] = field(default_factory=dict)

    def mean(self, structure: str, key: str) -> float:
        return self.summary[structure][f"{key}_mean"]


def present_structures(masks: np.ndarray) -> list[str]:
    return [s for s, ids in STRUCTURES.items() if region(masks, ids).any()]


def volumes_from_masks(masks: np.ndarray, ed: int, es: int, spacing: float) -> VolumePair:
    endo = STRUCTURES["endo"]
    return VolumePair(mask_volume(region(masks[ed], endo), spacing), mask_volume(region(masks[es], endo), spacing))


def evaluate(model: MediViSTA, items, clip_len: int | None = None) -> EvalReport:
    clip_len = clip_len or model.cfg.frames
    preds = []
    for it in items:
        clip, gt, idx = eval_clip(it, clip_len)
        preds.append((it, predict(model, clip), gt, idx))
    return evaluate_predictions(preds)


def evaluate_predictions(preds) -> EvalReport:
    """``preds``: iterable of (item, predicted (T,H,W), ground truth (T,H,W), source indices)."""
    report = EvalReport()
    for it, pred, gt, idx in preds:
        for s in present_structures(gt):
            m = structure_metrics(pred, gt, STRUCTURES[s], it.spacing)
            report.rows.append({"video_id": it.id, "structure": s, "dice": m["dice"], "dh_mm": m["dh_mm"],
                                "da_mm": m["da_mm"], "L": m["L"], "L_gt": m["L_gt"]})
        if it.true_volumes and it.es_idx in idx:
            ed, es = idx.index(it.ed_idx), idx.index(it.es_idx)
            try:
                with warnings.catch_warnings():
                    # an inverted ESV/EDV from a weak model is recorded, not warned about per video
                    warnings.simplefilter("ignore", UserWarning)
                    v = volumes_from_masks(pred, ed, es, it.spacing)
                ef = ejection_fraction(v)
            except MetricError:
                v, ef = VolumePair(float("nan"), float("nan")), float("nan")
            report.volumes.append({"video_id": it.id, "edv_pred": v.edv, "esv_pred": v.esv, "ef_pred": ef,
                                   "edv_true": it.true_volumes["edv"], "esv_true": it.true_volumes["esv"],
                                   "ef_true": it.true_volumes["ef"],
                                   "risk_pred": ef_risk(ef) if math.isfinite(ef) else False,
                                   "risk_true": ef_risk(it.true_volumes["ef"])})
    for s in STRUCTURES:
        rows = [r for r in report.rows if r["structure"] == s]
        if not rows:
            continue
        stats = {}
        for key in ("dice", "dh_mm", "da_mm", "L", "L_gt"):
            vals = np.array([r[key] for r in rows], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            stats[f"{key}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            stats[f"{key}_std"] = float(vals.std()) if len(vals) else float("nan")
        report.summary[s] = stats
    if len(report.volumes) >= 2:
        for q in ("edv", "esv", "ef"):
            a = [v[f"{q}_pred"] for v in report.volumes]
            b = [v[f"{q}_true"] for v in report.volumes]
            try:
                report.pearson[q] = pearson(a, b) if all(map(math.isfinite, a)) else float("nan")
            except MetricError:
                report.pearson[q] = float("nan")
    return report


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def write_report(report: EvalReport, path: str | os.PathLike) -> None:
    """One row per (video, structure), then mean/std rows, EF rows and the Pearson block."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROW_FIELDS)
        for r in report.rows:
            w.writerow([_fmt(r[k]) for k in ROW_FIELDS])
        for s, stats in report.summary.items():
            for agg in ("mean", "std"):
                w.writerow([agg, s] + [_fmt(stats[f"{k}_{agg}"]) for k in ROW_FIELDS[2:]])
        if report.volumes:
            w.writerow([])
            fields = ["video_id", "edv_pred", "esv_pred", "ef_pred", "edv_true", "esv_true", "ef_true",
                      "risk_pred", "risk_true"]
            w.writerow(fields)
            for v in report.volumes:
                w.writerow([_fmt(v[k]) for k in fields])
        if report.pearson:
            w.writerow([])
            w.writerow(["pearson", "quantity", "r"])
            for q, r in report.pearson.items():
                w.writerow(["pearson", q, _fmt(r)])
