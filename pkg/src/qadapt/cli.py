"""Command-line entry point: ``qadapt {generate,adapt,eval,sweep,ablate}``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric abort.
Run outputs go to ``$QADAPT_RUN_ROOT/<config digest>-<timestamp>/`` (default
root ``./runs``).
"""
import argparse
import logging
import os
import sys
import time
from pathlib import Path

from .config import AdaptationConfig, apply_overrides, load_config, save_config
from .data import SyntheticSpec, generate_synthetic, load_manifest
from .errors import AdapterError, ConfigError
from .pipeline import ABLATION_AXES, Checkpoint, ablate, evaluate, parse_grid, sweep, train

RUN_ROOT_ENV = "QADAPT_RUN_ROOT"

log = logging.getLogger("qadapt")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _fractions(text):
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fraction list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty fraction list")
    return values


def run_dir(config: AdaptationConfig, root=None):
    root = Path(root or os.environ.get(RUN_ROOT_ENV) or "runs")
    stamp = time.strftime("%Y%m%dT%H%M%S")
    base = root / f"{config.digest()}-{stamp}"
    path, n = base, 1
    while path.exists():
        path = Path(f"{base}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _load(args):
    config = load_config(args.config) if args.config else AdaptationConfig()
    config = apply_overrides(config, args.set)
    changes = {}
    if getattr(args, "train", None):
        changes["train_manifest"] = str(args.train)
    if getattr(args, "val", None):
        changes["val_manifest"] = str(args.val)
    if changes:
        config = config.replace(**changes)
    if not config.train_manifest:
        raise ConfigError("no training manifest: set train_manifest in the config or pass --train")
    print(f"effective-config {config.effective_line()}")
    # read manifests before any run directory exists so bad paths leave nothing behind
    train_m = load_manifest(config.train_manifest)
    val_m = load_manifest(config.val_manifest) if config.val_manifest else train_m
    return config, train_m, val_m


def _write_table(path, header, rows):
    lines = ["\t".join(header)] + ["\t".join(str(c) for c in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))


def cmd_generate(args):
    spec = SyntheticSpec(image_size=args.image_size, num_classes=args.classes, lesion_size=args.lesion_size,
                         prevalence=args.prevalence, shift_knob=args.shift, seed=args.seed,
                         with_reports=not args.no_reports)
    manifest = generate_synthetic(spec, args.count, args.split, args.out)
    print(manifest.path)


def cmd_adapt(args):
    config, train_m, val_m = _load(args)
    init = Checkpoint.load(args.init_checkpoint) if args.init_checkpoint else None
    out = run_dir(config, args.run_root)
    save_config(config, out / "config.yaml")
    result = train(config, train_m, val_m, init_checkpoint=init, log_path=out / "train_log.jsonl")
    result.checkpoint.save(out / "checkpoint.npz")
    (out / "report.txt").write_text(result.best_report.to_text(), encoding="utf-8")
    print(f"best epoch {result.best_epoch + 1}: macro AUC {result.best_report.macro_auc:.2f}")
    print(out / "checkpoint.npz")


def cmd_eval(args):
    ckpt = Checkpoint.load(args.checkpoint)
    config = ckpt.adaptation_config
    print(f"effective-config {config.effective_line()}")
    report = evaluate(ckpt, args.manifest)
    out = Path(args.out) if args.out else run_dir(config, args.run_root) / "report.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_text(), encoding="utf-8")
    print(f"macro AUC {report.macro_auc:.2f}  F1 {report.macro_f1:.2f}  ACC {report.macro_acc:.2f}")
    print(out)


def cmd_sweep(args):
    config, train_m, val_m = _load(args)
    out = run_dir(config, args.run_root)
    rows = sweep(config, args.fractions, train_m, val_m)
    table = [(r.fraction, len(r.train_ids), f"{r.report.macro_auc:.2f}", f"{r.report.macro_f1:.2f}",
              f"{r.report.macro_acc:.2f}") for r in rows]
    _write_table(out / "sweep.tsv", ["fraction", "n_train", "auc", "f1", "acc"], table)


def cmd_ablate(args):
    config, train_m, val_m = _load(args)
    grid = parse_grid(args.axis, args.grid)
    out = run_dir(config, args.run_root)
    rows = ablate(config, args.axis, grid, train_m, val_m)
    table = [(r.setting, f"{r.report.macro_auc:.2f}", f"{r.report.macro_f1:.2f}", f"{r.report.macro_acc:.2f}")
             for r in rows]
    _write_table(out / f"ablate_{args.axis}.tsv", [args.axis, "auc", "f1", "acc"], table)


def build_parser():
    parser = _Parser(prog="qadapt", description="Adapt frozen vision-language encoders to multi-label image diagnosis.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic small-lesion dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--count", required=True, type=_positive_int)
    g.add_argument("--classes", type=_positive_int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train")
    g.add_argument("--image-size", type=_positive_int, default=1024)
    g.add_argument("--lesion-size", type=_positive_int, default=32)
    g.add_argument("--prevalence", type=float, default=0.3)
    g.add_argument("--shift", type=float, default=0.0, help="domain shift knob in [0, 1]")
    g.add_argument("--no-reports", action="store_true")
    g.set_defaults(func=cmd_generate)

    def training_args(p):
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. focal.num_views=3 (repeatable)")
        p.add_argument("--train", type=Path, help="training manifest (overrides the config)")
        p.add_argument("--val", type=Path, help="validation manifest (overrides the config)")
        p.add_argument("--run-root", type=Path, help=f"output root (default ${RUN_ROOT_ENV} or ./runs)")

    a = sub.add_parser("adapt", help="train the adapter")
    training_args(a)
    a.add_argument("--init-checkpoint", type=Path, help="continue from an adapter checkpoint (in-domain)")
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="score a manifest with a checkpoint")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--manifest", required=True, type=Path)
    e.add_argument("--out", type=Path, help="report path (default: a new run directory)")
    e.add_argument("--run-root", type=Path)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="train on nested data fractions")
    training_args(s)
    s.add_argument("--fractions", type=_fractions, default=[0.1, 0.5, 1.0])
    s.set_defaults(func=cmd_sweep)

    b = sub.add_parser("ablate", help="vary one axis with all else fixed")
    training_args(b)
    b.add_argument("--axis", required=True, choices=ABLATION_AXES)
    b.add_argument("--grid", required=True, help='comma list, or for experts ";"-separated id lists like "A;A,B"')
    b.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except AdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
