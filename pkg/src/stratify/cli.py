"""Command line entry point: ``stratify run|sweep|report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .exceptions import StratifyError
from .experiment import (
    ALGORITHMS,
    ExperimentConfig,
    load_toml,
    parse_value,
    run_experiment,
    run_sweep,
    write_outputs,
)

log = logging.getLogger("stratify")


def _add_common(p):
    p.add_argument("--config", type=Path, help="TOML experiment file")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--algo", choices=ALGORITHMS, help="override train.algorithm")
    p.add_argument("--out-dir", type=Path, default=Path("runs"), help="output directory (default: runs)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override such as train.lr=0.1 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stratify", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_common(run)
    run.add_argument("--name", default=None, help="output file stem (default: the algorithm)")
    run.add_argument("--no-transcript", action="store_true", help="skip the NDJSON transcript")

    sweep = sub.add_parser("sweep", help="run the [sweep] grid of a config")
    _add_common(sweep)
    sweep.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                       help="extra sweep axis (repeatable)")

    report = sub.add_parser("report", help="summarize the JSON summaries in a directory")
    report.add_argument("out_dir", type=Path)
    return parser


def _parse_override(text):
    if "=" not in text:
        raise StratifyError(f"override {text!r} is not KEY=VALUE")
    key, value = text.split("=", 1)
    return key.strip(), parse_value(value.strip())


def _load(args):
    raw = load_toml(args.config) if args.config else {}
    grid = dict(raw.get("sweep", {}) or {})
    config = ExperimentConfig.from_dict(raw)
    overrides = dict(_parse_override(o) for o in args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.algo is not None:
        overrides["train.algorithm"] = args.algo
    if overrides:
        config = config.override(**overrides)
    return config.validate(), grid


def cmd_run(args) -> int:
    config, _ = _load(args)
    name = args.name or config.name or config.train.algorithm

    def progress(e):
        log.info("epoch %d top1=%.4f transfers=%d", e.epoch, e.top1, e.transfers)

    record = run_experiment(config, on_epoch=progress)
    paths = write_outputs(record, args.out_dir, name, transcript=not args.no_transcript)
    s = record.summary()
    print(f"{name}: best top1 {s['best_top1']:.4f} at epoch {s['best_epoch']}, "
          f"{s['transfers']} transfers, T={s['T']:g}s -> {paths['csv']}")
    return 0


def cmd_sweep(args) -> int:
    config, grid = _load(args)
    for axis in args.grid:
        key, values = axis.split("=", 1) if "=" in axis else (axis, "")
        grid[key.strip()] = [parse_value(v.strip()) for v in values.split(",") if v.strip()]
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise StratifyError(f"sweep axis {key!r} needs a non-empty list")
    results = run_sweep(config, grid, args.out_dir)
    for name, _, rec in results:
        print(f"{name}: best top1 {rec.best_top1:.4f} (E{rec.best_epoch}), {rec.transfers} transfers")
    return 0


def cmd_report(args) -> int:
    files = sorted(args.out_dir.glob("*.json"))
    if not files:
        raise StratifyError(f"no run summaries in {args.out_dir}")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["name", "algorithm", "best_top1", "best_epoch", "rounds", "transfers", "f_freq", "T"])
    for f in files:
        s = json.loads(f.read_text(encoding="utf-8"))
        w.writerow([f.stem, s["algorithm"], f"{s['best_top1']:.4f}", s["best_epoch"], s["rounds"],
                    s["transfers"], s["f_freq"], s["T"]])
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}[args.command]
    try:
        return handler(args)
    except (StratifyError, ValueError, OSError) as exc:
        print(f"stratify: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
