"""Ablation grid on a small phantom set: writes one ablation_<axis>.csv per axis and a summary JSON."""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from medivista.ablation import AXES, ablation_defaults, run_axis
from medivista.phantom import make_records, write_dataset


def run(out: Path, count: int = 8, seed: int = 3, axes=None, workers: int = 1) -> dict:
    t0 = time.perf_counter()
    data = out / "data"
    if not (data / "manifest.json").exists():
        write_dataset(make_records(count, seed), data, seed=seed)
    summary = {}
    for axis in axes or list(AXES):
        rows = run_axis(axis, data, out, ablation_defaults(), workers)
        summary[axis] = [{"variant": r.variant, "dice": r.dice, "L": r.L} for r in rows]
        print(json.dumps({axis: summary[axis]}, ensure_ascii=False), flush=True)
    result = {"axes": summary, "wall_seconds": time.perf_counter() - t0}
    (out / "ablation.json").write_text(json.dumps(result, indent=2, ensure_ascii=False), encoding="utf-8")
    return result


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--axis", action="append", choices=sorted(AXES))
    p.add_argument("--workers", type=int, default=1)
    a = p.parse_args()
    res = run(a.out, a.count, a.seed, a.axis, a.workers)
    print(f"done in {res['wall_seconds']:.0f}s")


if __name__ == "__main__":
    main()
