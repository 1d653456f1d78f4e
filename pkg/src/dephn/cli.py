"""Command line entry point: ``dephn <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import harness
from . import virtual_gradient as vg
from .data import (
    THRESHOLDS,
    VARIANTS,
    DatasetSpec,
    generate_dataset,
    read_csv,
    write_csv,
)


def _load_config(args) -> harness.TrainConfig:
    cfg = harness.TrainConfig.from_file(args.config) if args.config else harness.TrainConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "data", None):
        changes["data_path"] = str(args.data)
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def cmd_generate_data(args) -> int:
    spec = DatasetSpec(
        n_samples=args.n_samples,
        seed=args.seed if args.seed is not None else 0,
        variant=args.variant,
        threshold=args.threshold,
        quantile=args.quantile,
        noise_std=args.noise_std,
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / args.name
    ds = generate_dataset(spec)
    write_csv(ds, path)
    print(f"wrote {len(ds)} rows to {path} (confidence correlation {ds.meta['confidence_correlation']:.4f})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    run = harness.run_experiment(cfg, args.out_dir)
    print(harness.format_table([{"model": cfg.model, **m} for m in run.metrics], ["model", "task", "logloss", "auc", "note"]))
    print(f"artifacts in {run.out_dir} ({run.wall_clock:.1f}s)")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    rows = harness.sweep(cfg, args.out_dir, n_jobs=args.n_jobs)
    print(harness.format_table(rows))
    return 0


def cmd_coeff_grid(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    functions = list(vg.COEFFICIENTS) if args.function == "all" else [args.function]
    for fn in functions:
        path = out / f"coeff_grid_{fn}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            n = vg.write_grid_csv(fn, args.resolution, fh)
        print(f"wrote {n} rows to {path}")
    return 0


def cmd_eval(args) -> int:
    est = harness.load_run(args.run_dir)
    ds = read_csv(args.data)
    metrics = harness.evaluate(est, ds)
    info = json.loads((Path(args.run_dir) / "config.json").read_text(encoding="utf-8"))
    out = Path(args.out_dir or args.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_rows(
        out / "eval_metrics.csv",
        ["model", "task", "logloss", "auc", "note"],
        [(est.model, m["task"], m["logloss"], m["auc"], m["note"]) for m in metrics],
        info["config_hash"],
        est.seed,
    )
    print(harness.format_table([{"model": est.model, **m} for m in metrics], ["model", "task", "logloss", "auc", "note"]))
    return 0


def cmd_report(args) -> int:
    dirs = args.runs or [args.out_dir]
    for d in dirs:
        if not Path(d).exists():
            raise FileNotFoundError(f"run directory not found: {d}")
    rows = harness.summarize(dirs)
    if not rows:
        raise FileNotFoundError(f"no metrics.csv found under {', '.join(map(str, dirs))}")
    print(harness.format_table(rows))
    if args.output:
        cols = list(dict.fromkeys(k for r in rows for k in r))
        with open(args.output, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dephn", description="Multi-task learning lab: DEPHN, MTPHN, MMoE-lite, DNN.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default="runs")
        if config:
            p.add_argument("--config", default=None, help="JSON file with TrainConfig keys")

    p = sub.add_parser("generate-data", help="synthesize a dataset CSV + manifest")
    common(p, config=False)
    p.add_argument("--variant", choices=VARIANTS, default="unrelated")
    p.add_argument("--n-samples", type=int, default=55_000)
    p.add_argument("--threshold", choices=THRESHOLDS, default="quantile")
    p.add_argument("--quantile", type=float, default=0.7)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--name", default="data.csv")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one model and write run artifacts")
    common(p)
    p.add_argument("--data", default=None, help="dataset CSV (default: generate from config)")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="coefficient function x similarity grid")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--n-jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("coeff-grid", help="write gamma heat-map grids as CSV")
    common(p, config=False)
    p.add_argument("--function", choices=[*vg.COEFFICIENTS, "all"], default="all")
    p.add_argument("--resolution", type=int, default=101)
    p.set_defaults(func=cmd_coeff_grid)

    p = sub.add_parser("eval", help="evaluate a saved run on a dataset CSV")
    common(p, config=False)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval, out_dir=None)

    p = sub.add_parser("report", help="summarize metrics from run directories")
    common(p, config=False)
    p.add_argument("runs", nargs="*")
    p.add_argument("--output", default=None, help="also write the summary as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dephn {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
