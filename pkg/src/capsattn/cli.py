"""Command-line entry point: ``capsattn {synth,train,eval,gradcheck,ablate}``.

Exit codes: 0 success, 2 usage, 3 data/model mismatch, 4 numerical failure,
5 gradient-check failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

from . import data as D
from . import gradcheck as G
from . import model as M
from . import tensor as tc
from . import train as TR

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def read_kv(path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; blank lines and ``#`` comments are skipped."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value", EXIT_USAGE)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_kv(path, items: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(f"{k}={v}\n" for k, v in items.items()))
    os.replace(tmp, path)


def _positive(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _nonneg(value: str) -> int:
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {n}")
    return n


def _load_dataset(path) -> D.Dataset:
    try:
        return D.load_dataset(path)
    except (OSError, D.FormatError) as e:
        raise CliError(f"cannot read dataset {path}: {e}", EXIT_DATA) from None


def _model_config(args, ds: D.Dataset) -> M.ModelConfig:
    T, H, W, C = ds.sample_shape
    overrides = dict(T=T, patch_h=H, patch_w=W, bands=C, num_classes=ds.num_classes, variant=args.variant, seed=args.seed)
    for key in ("conv_channels", "num_primary", "caps_dim", "num_out_caps", "lstm_units", "dense_hidden", "routing_iters"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if "lstm_units" in overrides:
        overrides["attn_dim"] = 2 * overrides["lstm_units"]
    try:
        return M.preset(args.preset, **overrides)
    except M.ConfigError as e:
        raise CliError(f"invalid model configuration: {e}", EXIT_USAGE) from None


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> int:
    try:
        cfg = D.SyntheticConfig(num_samples=args.samples, num_classes=args.classes, seed=args.seed, noise_std=args.noise)
        ds = D.split(D.generate_synthetic(cfg), seed=args.seed)
    except D.ConfigError as e:
        raise CliError(str(e), EXIT_USAGE) from None
    try:
        D.save_dataset(ds, args.out)
    except OSError as e:
        raise CliError(f"cannot write {args.out}: {e}", EXIT_USAGE) from None
    for k, name in enumerate(ds.class_names):
        tr, va, te = (int(ds.class_counts(s)[k]) for s in ("train", "val", "test"))
        print(f"{k:3d} {name:<18s} {tr + va + te:6d}  (train {tr}, val {va}, test {te})")
    return EXIT_OK


def _train_one(args, ds: D.Dataset, variant: str, out_model, log_path, manifest_path) -> tuple[M.ModelState, TR.TrainResult]:
    mcfg = _model_config(replace_ns(args, variant=variant), ds)
    tcfg = TR.TrainConfig(
        batch_size=args.batch, learning_rate=args.lr, max_epochs=args.epochs,
        early_stop_patience=args.patience, seed=args.seed,
    )
    m = M.build(mcfg)
    started = time.time()
    try:
        result = TR.train(m, ds, tcfg) if args.epochs > 0 else TR.TrainResult(m)
    except TR.TrainingError as e:
        raise CliError(f"numerical failure: {e}", EXIT_NUMERIC) from None
    except D.WeightError as e:
        raise CliError(f"unusable dataset: {e}", EXIT_DATA) from None
    if out_model:
        M.save(m, out_model)
    if log_path:
        TR.write_log(result.history, log_path)
    if manifest_path:
        manifest = {"command": "train", "data": args.data, "variant": mcfg.variant, "preset": args.preset}
        manifest.update({f"model.{k}": v for k, v in mcfg.to_dict().items()})
        manifest.update(epochs=args.epochs, batch=args.batch, lr=args.lr, patience=args.patience, seed=args.seed)
        manifest.update(
            out_model=out_model or "", log=log_path or "", parameters=m.num_parameters(),
            best_epoch=result.best_epoch, wall_clock_s=f"{time.time() - started:.3f}",
        )
        if result.history:
            last = result.history[-1]
            manifest["final_train_loss"] = repr(last.train_loss)
            if last.val is not None:
                manifest["final_val_F"] = repr(last.val.f_score)
        write_kv(manifest_path, manifest)
    return m, result


def replace_ns(ns: argparse.Namespace, **kw) -> argparse.Namespace:
    d = vars(ns).copy()
    d.update(kw)
    return argparse.Namespace(**d)


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    if not len(ds.indices("train")):
        raise CliError("dataset has an empty train split", EXIT_DATA)
    manifest = args.manifest or (str(args.out_model) + ".manifest" if args.out_model else None)
    m, result = _train_one(args, ds, args.variant, args.out_model, args.log, manifest)
    last = result.history[-1] if result.history else None
    print(f"variant={m.config.variant} parameters={m.num_parameters()} epochs_run={len(result.history)} best_epoch={result.best_epoch}")
    if last is not None:
        print(f"final train_loss={last.train_loss:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_dataset(args.data)
    try:
        m = M.load(args.model)
    except (OSError, M.FormatError) as e:
        raise CliError(f"cannot read model {args.model}: {e}", EXIT_DATA) from None
    c = m.config
    if ds.num_classes != c.num_classes or ds.sample_shape != (c.T, c.patch_h, c.patch_w, c.bands):
        raise CliError(
            f"model expects K={c.num_classes}, sample shape {(c.T, c.patch_h, c.patch_w, c.bands)}; "
            f"dataset has K={ds.num_classes}, {ds.sample_shape}",
            EXIT_DATA,
        )
    try:
        met, cm = TR.evaluate(m, ds, args.split)
    except TR.EvaluationError as e:
        raise CliError(str(e), EXIT_DATA) from None
    print(f"accuracy={met.accuracy:.6f} precision={met.precision:.6f} recall={met.recall:.6f} f_score={met.f_score:.6f}")
    print(f"macro precision={met.macro_precision:.6f} recall={met.macro_recall:.6f} f_score={met.macro_f_score:.6f}")
    if args.confusion_out:
        TR.export_confusion(cm, args.confusion_out, args.format, ds.class_names)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    faults = [tc.corrupt_backward(op) for op in (args.corrupt_backward or [])]
    for f in faults:
        f.__enter__()
    try:
        report = G.check_model(M.preset("mini", seed=args.seed), seed=args.seed, tolerance=args.tolerance)
    finally:
        for f in faults:
            f.__exit__(None, None, None)
    for name, err in report.per_group.items():
        status = "ok" if err <= args.tolerance else "FAIL"
        print(f"{name:<14s} max_rel_err={err:.3e}  {status}")
    if not report.passed:
        print(f"gradient check failed for: {', '.join(report.failing)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_ablate(args) -> int:
    ds = _load_dataset(args.data)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in M.VARIANTS:
        stem = out / variant
        m, _ = _train_one(args, ds, variant, f"{stem}.model", f"{stem}.log.csv", f"{stem}.manifest")
        try:
            met, cm = TR.evaluate(m, ds, "test")
        except TR.EvaluationError as e:
            raise CliError(str(e), EXIT_DATA) from None
        TR.export_confusion(cm, f"{stem}.confusion.csv", "csv", ds.class_names)
        rows.append((variant, *met.row()))
        print(f"{variant:<9s} acc={met.accuracy:.4f} P={met.precision:.4f} R={met.recall:.4f} F={met.f_score:.4f}", flush=True)
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "Acc", "P", "R", "F"])
        for variant, *vals in rows:
            w.writerow([variant, *(f"{v:.6f}" for v in vals)])
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--preset", choices=sorted(M.PRESETS), default="full", help="layer sizes (full = default-size model)")
    for flag in ("conv-channels", "num-primary", "caps-dim", "num-out-caps", "lstm-units", "dense-hidden", "routing-iters"):
        p.add_argument(f"--{flag}", type=_positive, default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=_nonneg, default=50)
    p.add_argument("--batch", type=_positive, default=50)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--patience", type=_positive, default=10)
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="capsattn", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file supplying defaults; explicit flags win")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phenology dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=_positive, default=9200)
    p.add_argument("--classes", type=_positive, default=23)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one variant")
    _add_train_flags(p)
    p.add_argument("--variant", type=M.canonical_variant, default="CapsAttn")
    p.add_argument("--out-model")
    p.add_argument("--log")
    p.add_argument("--manifest", help="run manifest path (default: <out-model>.manifest)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--confusion-out")
    p.add_argument("--format", choices=["csv", "pgm"], default="csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the miniature CapsAttn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--corrupt-backward", action="append", metavar="OP", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train all four variants and write a summary CSV")
    _add_train_flags(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_ablate, variant="CapsAttn")
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return parser.parse_args(argv)
    try:
        cfg = read_kv(known.config)
    except OSError as e:
        raise CliError(f"cannot read config {known.config}: {e}", EXIT_USAGE) from None
    commands = parser._subparsers._group_actions[0].choices
    pos = next((i for i, a in enumerate(argv) if a in commands), None)
    if pos is None:
        return parser.parse_args(argv)
    accepted = commands[argv[pos]]._option_string_actions
    injected = []
    for key, val in cfg.items():
        flag = "--" + key.replace("_", "-")
        if flag in accepted and val != "":
            injected += [flag, val]
    # file values go first so explicit flags override them
    return parser.parse_args(argv[:pos + 1] + injected + argv[pos + 1:])


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as e:
        return int(e.code or 0)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
