"""Command-line entry point: phantom, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, dump_run_config, load_run_config, set_key, to_dict

EXIT_OK, EXIT_USAGE, EXIT_FAIL = 0, 1, 2

log = logging.getLogger("medivista")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0 or h % 2 or w % 2:
        raise argparse.ArgumentTypeError(f"size must be positive and even, got {text!r}")
    return h, w


# ---- phantom -----------------------------------------------------------------


def cmd_phantom(args) -> int:
    from .phantom import PhantomParams, make_records, write_dataset

    base = PhantomParams(frames=args.frames, size=args.size, eject=args.eject, la=args.la)
    base.validate()
    lo, hi = args.eject_spread
    if not 0 <= lo <= hi:
        raise UsageError("--eject-spread takes two non-negative numbers, low <= high")
    eject_range = (args.eject - lo, args.eject + hi) if hi > 0 else None
    if eject_range and not (0 <= eject_range[0] and eject_range[1] < 1):
        raise UsageError(f"eject range {eject_range} leaves [0, 1)")
    records = make_records(args.count, args.seed, base, eject_range)
    manifest = write_dataset(records, args.out, seed=args.seed)
    splits = {t: sum(e["split"] == t for e in manifest["entries"]) for t in ("train", "val", "test")}
    print(json.dumps({"out": str(args.out), "count": manifest["count"], "splits": splits}))
    return EXIT_OK


# ---- train -------------------------------------------------------------------

_TRAIN_FLAGS = {
    "epochs": "train.epochs",
    "pretrain_epochs": "train.pretrain_epochs",
    "lr": "train.learning_rate",
    "batch_size": "train.batch_size",
    "seed": "train.seed",
    "clip_len": "train.clip_len",
}


def build_run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    for flag, key in _TRAIN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            set_key(cfg, key, json.dumps(val))
    if getattr(args, "clip_len", None) is not None:
        cfg.model.frames = args.clip_len
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        set_key(cfg, key, raw)
    if getattr(args, "data", None):
        cfg.data = str(args.data)
    if getattr(args, "out", None):
        cfg.out = str(args.out)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def cmd_train(args) -> int:
    from .model import MediViSTA
    from .phantom import read_dataset
    from .train import TrainingDiverged, train_loop

    cfg = build_run_config(args)
    if not cfg.data:
        raise UsageError("train needs --data (or 'data' in the config)")
    out = Path(cfg.out or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    dump_run_config(cfg, out / "config.json")
    print(json.dumps(to_dict(cfg), sort_keys=True))
    train = read_dataset(cfg.data, "train")
    val = read_dataset(cfg.data, "val")
    if not train:
        raise UsageError(f"no training entries in {cfg.data}")
    model = MediViSTA(cfg.model, seed=cfg.train.seed)
    try:
        res = train_loop(train, val, model, cfg.train, out,
                         on_epoch=lambda r: log.info("epoch %(epoch)d %(phase)s loss %(train_loss).4f val %(val_dice).4f", r))
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; last good checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({"checkpoint": res.checkpoint, "best_epoch": res.best_epoch, "best_val_dice": res.best_val_dice}))
    return EXIT_OK


# ---- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .evaluate import evaluate, write_report
    from .phantom import read_dataset
    from .train import load_checkpoint

    model, _, _ = load_checkpoint(args.ckpt)
    items = read_dataset(args.data, None if args.split == "all" else args.split)
    if not items:
        raise UsageError(f"no '{args.split}' entries in {args.data}")
    report = evaluate(model, items, model.cfg.frames)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    write_report(report, args.report)
    print(json.dumps({"report": str(args.report), "summary": report.summary, "pearson": report.pearson}))
    return EXIT_OK


# ---- gradcheck ---------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradcheck import check_registered

    t0 = time.perf_counter()
    try:
        reports = check_registered(args.op or None, tol=args.tol)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    width = max(len(r.name) for r in reports)
    print(f"{'op':<{width}}  {'max_rel_err':>12}  {'tol':>8}  result")
    for r in reports:
        print(f"{r.name:<{width}}  {r.max_rel_err:12.3e}  {r.tol:8.1e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_FAIL if failed else EXIT_OK


# ---- ablate ------------------------------------------------------------------


def cmd_ablate(args) -> int:
    from .ablation import AXES, ablation_defaults, run_axis

    axes = list(AXES) if args.axis == "all" else [args.axis]
    base = load_run_config(args.config) if args.config else ablation_defaults()
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        set_key(base, *item.split("=", 1))
    base.data = str(args.data)
    base.out = str(args.out)
    base.validate()
    Path(args.out).mkdir(parents=True, exist_ok=True)
    dump_run_config(base, Path(args.out) / "config.json")
    for axis in axes:
        rows = run_axis(axis, args.data, args.out, base, args.workers)
        print(f"[{axis}]")
        for r in rows:
            print(f"  {r.variant:<24} dice {r.dice:.4f}  L {r.L:.4f}  ({r.seconds:.1f}s)")
    return EXIT_OK


# ---- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .ablation import AXES

    p = _Parser(prog="medivista", description="Temporal-fusion video segmentation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="generate a synthetic phantom dataset")
    ph.add_argument("--out", required=True, type=Path)
    ph.add_argument("--count", type=int, default=100)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--frames", type=int, default=14)
    ph.add_argument("--size", type=_size, default=(64, 64))
    ph.add_argument("--eject", type=float, default=0.4, help="centre ejection fraction of the shape scale")
    ph.add_argument("--eject-spread", type=float, nargs=2, default=(0.15, 0.15), metavar=("BELOW", "ABOVE"),
                    help="per-record eject drawn from [eject-BELOW, eject+ABOVE]; 0 0 fixes geometry")
    ph.add_argument("--la", action="store_true", help="add the atrial blob (class 3)")
    ph.set_defaults(func=cmd_phantom)

    tr = sub.add_parser("train", help="train on a phantom dataset")
    tr.add_argument("--data", type=Path)
    tr.add_argument("--config", type=Path)
    tr.add_argument("--out", type=Path)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--clip-len", dest="clip_len", type=int)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. model.fact.rank=8")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--data", required=True, type=Path)
    ev.add_argument("--ckpt", required=True, type=Path)
    ev.add_argument("--report", required=True, type=Path)
    ev.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--tol", type=float, default=1e-5)
    gc.add_argument("--op", action="append", help="restrict to one op (repeatable)")
    gc.set_defaults(func=cmd_gradcheck)

    ab = sub.add_parser("ablate", help="run an ablation axis")
    ab.add_argument("--axis", required=True, choices=sorted(AXES) + ["all"])
    ab.add_argument("--data", required=True, type=Path)
    ab.add_argument("--out", required=True, type=Path)
    ab.add_argument("--config", type=Path)
    ab.add_argument("--set", action="append", metavar="KEY=VALUE")
    ab.add_argument("--workers", type=int, default=1)
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"medivista {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"medivista {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
