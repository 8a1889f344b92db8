"""Command-line front end.

Every failure prints a single ``error: <kind>: <message>`` line on stderr and
exits with 2 (configuration), 3 (malformed file) or 4 (numeric failure).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as kdata
from .errors import ConfigError, TernHybridError
from .model import analysis, serialize
from .model.arch import ArchSpec, build_model
from .model.graph import HybridModel, accuracy, densified, forward_counted, predict
from .opcount import COUNT_MODES

SPLITS = ("train", "val", "test")


# --- helpers ----------------------------------------------------------------

def _data_path(data: str, split: str) -> Path | None:
    """A directory resolves to ``<dir>/<split>.kwsf``; a file stands for itself."""
    p = Path(data)
    if p.is_dir():
        f = p / f"{split}.kwsf"
        return f if f.exists() else None
    return p


def load_split(data: str | None, split: str, required: bool = True) -> kdata.FeatureDataset | None:
    if data is None:
        if required:
            raise ConfigError("--data is required")
        return None
    path = _data_path(data, split)
    if path is None:
        if required:
            raise ConfigError(f"no {split}.kwsf in {data}")
        return None
    return kdata.load(path, split)


def _sibling(data: str, split: str) -> kdata.FeatureDataset | None:
    """The ``split`` companion of a directory or of a ``*train*`` file, if present."""
    p = Path(data)
    if p.is_dir():
        return load_split(data, split, required=False)
    if "train" in p.name:
        q = p.with_name(p.name.replace("train", split))
        if q.exists():
            return kdata.load(q, split)
    return None


def _load_model(path: str | None) -> HybridModel:
    if path is None:
        raise ConfigError("--model is required")
    if not Path(path).exists():
        raise ConfigError(f"model file not found: {path}")
    return serialize.load(path)


def _train_config(args):
    from .train import TrainConfig

    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    for p, n in zip((1, 2, 3), (args.epochs1, args.epochs2, args.epochs3)):
        if n is not None:
            setattr(cfg, f"epochs_phase{p}", n)
    cfg.__post_init__()
    return cfg


def _print_row(row: dict) -> None:
    print(
        f"epoch {row['epoch']:3d} phase {row['phase']} loss {row['loss']:.4f} "
        f"train {row['train_acc']:.4f} val {row['val_acc']:.4f} sigma_I {row['sigma_I']:.2f}",
        flush=True,
    )


def mult_count(report: analysis.OpReport) -> int:
    """Multiplications, with every MAC counted as one."""
    return report.muls + report.macs


def comparison(st: HybridModel, dense: HybridModel, mode: str) -> str:
    a = analysis.count_ops(st, mode)
    b = analysis.count_ops(dense, mode)
    ma, mb = mult_count(a), mult_count(b)
    red = 100.0 * (1 - ma / mb) if mb else 0.0
    return "\n".join([
        f"{'':12s}{'strassen':>12s}{'dense':>12s}",
        f"{'mults':12s}{ma:12d}{mb:12d}",
        f"{'adds':12s}{a.adds:12d}{b.adds:12d}",
        f"{'ops':12s}{a.ops:12d}{b.ops:12d}",
        f"{'model KB':12s}{analysis.kb(a.model_bytes):12.2f}{analysis.kb(b.model_bytes):12.2f}",
        f"{'footprint KB':12s}{analysis.kb(a.footprint_bytes):12.2f}{analysis.kb(b.footprint_bytes):12.2f}",
        f"multiplication reduction: {red:.2f}%",
    ])


def confusion(y_true: np.ndarray, y_pred: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


# --- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.out is None:
        raise ConfigError("--out is required")
    splits = kdata.gen_data(args.classes, args.per_class, args.seed or 0, args.difficulty)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        kdata.save(ds, out / f"{name}.kwsf")
        print(f"{name}: {len(ds)} samples -> {out / f'{name}.kwsf'}")
    oracle = kdata.nearest_prototype_accuracy(splits["test"], splits["train"].meta["prototypes"])
    print(f"nearest-prototype test accuracy: {oracle:.4f}")
    return 0


def cmd_train(args) -> int:
    from .train import train

    if args.arch is None and args.model is None:
        raise ConfigError("give --arch (fresh model) or --model (checkpoint)")
    if args.out is None:
        raise ConfigError("--out is required")
    cfg = _train_config(args)
    model = _load_model(args.model) if args.model else build_model(ArchSpec.from_file(args.arch), seed=cfg.seed)
    train_ds = load_split(args.data, "train")
    val_ds = _sibling(args.data, "val")
    teacher = _load_model(args.teacher) if args.teacher else None
    phases = tuple(int(p) for p in args.phases.split(","))
    if not phases or any(p not in (1, 2, 3) for p in phases):
        raise ConfigError("--phases takes a comma list drawn from 1,2,3")
    log = None if args.quiet else _print_row
    out, hist = train(model, train_ds, cfg, val_ds, teacher=teacher, phases=phases, log=log)
    serialize.save(out, args.out)
    if args.history:
        hist.save(args.history)
    test = _sibling(args.data, "test")
    if test is not None:
        print(f"test accuracy: {accuracy(out, test.x, test.y):.4f}")
    print(f"saved {args.out}")
    return 0


def cmd_strassenify(args) -> int:
    args.phases = "2,3"
    if args.model is None:
        raise ConfigError("--model (phase-1 checkpoint) is required")
    return cmd_train(args)


def cmd_quantize(args) -> int:
    from .quant import post_training_quantize

    model = _load_model(args.model)
    if args.out is None:
        raise ConfigError("--out is required")
    # a fixed leading slice of the training split; val overfits the format search
    calib = load_split(args.data, "train")
    n = len(calib) if args.calib_size <= 0 else min(args.calib_size, len(calib))
    q = post_training_quantize(model, calib.x[:n], calib.y[:n], args.policy)
    serialize.save(q, args.out)
    before, after = analysis.model_size(model).total_bytes, analysis.model_size(q).total_bytes
    print(f"policy {args.policy}: model {analysis.kb(before):.2f} KB -> {analysis.kb(after):.2f} KB")
    test = _sibling(args.data, "test")
    if test is not None:
        print(f"test accuracy: float {accuracy(model, test.x, test.y):.4f}  quantized {accuracy(q, test.x, test.y):.4f}")
    print(f"saved {args.out}")
    return 0


def cmd_analyze(args) -> int:
    if (args.arch is None) == (args.model is None):
        raise ConfigError("give exactly one of --arch and --model")
    if args.arch:
        spec = ArchSpec.from_file(args.arch)
        model = build_model(spec, seed=args.seed or 0)
        title = f"{spec.name} ({args.arch})"
    else:
        model = _load_model(args.model)
        title = f"{model.name} ({args.model})"
    report = analysis.count_ops(model, args.mode)
    print(analysis.format_report(report, title))
    if model.is_strassen:
        print()
        print(comparison(model, densified(model), args.mode))
    if args.out:
        Path(args.out).write_text(analysis.report_csv(report))
    return 0


def cmd_infer(args) -> int:
    model = _load_model(args.model)
    ds = load_split(args.data, "test")
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} outside [0, {len(ds)})")
    x = ds.x[args.index]
    if args.count_ops:
        scores, report = forward_counted(model, x, args.mode)
    else:
        scores, report = predict(model, x[None])[0], None
    scores = np.asarray(scores).reshape(-1)
    print("scores: " + " ".join(f"{v:.6g}" for v in scores))
    print(f"predicted: {int(np.argmax(scores))}  label: {int(ds.y[args.index])}")
    if report is not None:
        print(analysis.format_report(report, "instrumented"))
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    ds = load_split(args.data, "test")
    pred = np.argmax(predict(model, ds.x), axis=1)
    print(f"accuracy: {np.mean(pred == ds.y):.4f} ({int(np.sum(pred == ds.y))}/{len(ds)})")
    cm = confusion(ds.y, pred, model.num_classes)
    w = max(3, len(str(cm.max())))
    print("confusion (rows = label, cols = predicted):")
    for i, row in enumerate(cm):
        print(f"{i:>3d} " + " ".join(f"{v:>{w}d}" for v in row))
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ternhybrid", description="Ternary hybrid conv + tree toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        if "arch" in flags:
            p.add_argument("--arch", help="architecture file")
        if "model" in flags:
            p.add_argument("--model", help="model file (.thnt)")
        if "data" in flags:
            p.add_argument("--data", help="dataset directory or .kwsf file")
        if "out" in flags:
            p.add_argument("--out", help="output path")
        if "seed" in flags:
            p.add_argument("--seed", type=int, default=None)
        if "mode" in flags:
            p.add_argument("--mode", choices=COUNT_MODES, default="inference_nnz")

    p = sub.add_parser("gen-data", help="write a synthetic train/val/test set")
    common(p, "out", "seed")
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--difficulty", type=float, default=1.0)
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (
        ("train", cmd_train, "train a model (phases 1-3 by default)"),
        ("strassenify", cmd_strassenify, "run phases 2-3 from a phase-1 checkpoint"),
    ):
        p = sub.add_parser(name, help=helptext)
        common(p, "arch", "model", "data", "out", "seed")
        p.add_argument("--config", help="training config file with a [train] stanza")
        p.add_argument("--teacher", help="teacher model for distillation")
        p.add_argument("--history", help="write per-epoch history CSV here")
        p.add_argument("--epochs1", type=int)
        p.add_argument("--epochs2", type=int)
        p.add_argument("--epochs3", type=int)
        p.add_argument("--quiet", action="store_true")
        if name == "train":
            p.add_argument("--phases", default="1,2,3")
        p.set_defaults(func=func)

    p = sub.add_parser("quantize", help="fold batch norm, calibrate and quantize")
    common(p, "model", "data", "out")
    p.add_argument("--policy", default="mixed", help="mixed, int8 or int16")
    p.add_argument("--calib-size", type=int, default=480, help="training samples used for calibration (0 = all)")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("analyze", help="operation counts, model size and footprint")
    common(p, "arch", "model", "out", "seed", "mode")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("infer", help="class scores for one sample")
    common(p, "model", "data", "mode")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--count-ops", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="accuracy and confusion matrix")
    common(p, "model", "data")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TernHybridError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
