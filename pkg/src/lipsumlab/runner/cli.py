"""Command-line entry point: ``lipsumlab <command> --config PATH [--seed N] [--out DIR]``.

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as X
from .config import ConfigError, load_config
from .report import write_report

COMMANDS = ("pretrain", "finetune", "posthoc", "evaluate", "sweep", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipsumlab", description="Robust fine-tuning laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "pretrain": "contrastive pre-training for each seed",
        "finetune": "fine-tune every configured method (pre-trains if needed)",
        "posthoc": "WiSE / TPGM-C sweeps and greedy soup / ensemble",
        "evaluate": "write metrics reports for the zero-shot and fine-tuned models",
        "sweep": "run the full experiment matrix and aggregate tables",
        "report": "aggregate report.json files into summary tables",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, required=name != "report", help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="run only this seed")
        p.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _per_seed(cfg, out: Path, seed, stage) -> X.RunLog:
    runlog = X.RunLog()
    for s in X.selected_seeds(cfg, seed):
        ctx = runlog.cell("pretrain", s, X.prepare_seed, cfg, s, out, stage != "pretrain")
        if ctx is None or stage == "pretrain":
            continue
        if stage == "finetune":
            X.finetune_seed(cfg, ctx, out, runlog)
            continue
        X.load_models(cfg, ctx, out)
        if stage == "evaluate":
            X.evaluate_seed(cfg, ctx, out, runlog)
        elif stage == "posthoc" and cfg.posthoc is not None:
            X.posthoc_seed(cfg, ctx, out, runlog)
    X.write_json(out / f"errors_{stage}.json", runlog.errors)
    return runlog


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config is not None else None
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    if args.command == "report":
        out = args.out or (Path(cfg.output_dir) if cfg else None)
        if out is None:
            print("config error: report needs --out or --config", file=sys.stderr)
            return 1
        try:
            write_report(out)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    out = args.out or Path(cfg.output_dir)
    try:
        if args.command == "sweep":
            runlog = X.run(cfg, out, args.seed)
        else:
            out.mkdir(parents=True, exist_ok=True)
            runlog = _per_seed(cfg, out, args.seed, args.command)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for err in runlog.errors:
        print(f"cell failed: {err['cell']} (seed {err['seed']}): {err['error']}", file=sys.stderr)
    return 2 if runlog.errors else 0


if __name__ == "__main__":
    sys.exit(main())
