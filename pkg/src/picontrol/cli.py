"""Command line entry point: ``picontrol run|summarize|validate``.

Exit codes: 0 on success, 1 if any episode aborted, 2 on a config error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from .config import ConfigError, load_scenario
from .experiments import cells, read_table, run_suite, summarize

EXIT_OK, EXIT_ABORTED, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="picontrol", description="Path-integral multi-UAV planning experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every episode of a scenario file")
    run.add_argument("config", type=Path)
    run.add_argument("--out", type=Path, default=Path("results"), help="output directory (default: results)")
    run.add_argument("--parallel", type=int, default=1, metavar="K", help="worker processes (default: 1)")
    run.add_argument("--seed-offset", type=int, default=0, metavar="J", help="added to every seed")

    summ = sub.add_parser("summarize", help="aggregate a result table")
    summ.add_argument("table", type=Path)
    summ.add_argument("--by", required=True, help="comma-separated group columns, e.g. point,controller")

    val = sub.add_parser("validate", help="check a scenario file without running it")
    val.add_argument("config", type=Path)
    return p


def _write_rows(rows: list[dict], out) -> None:
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    w = csv.writer(out)
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r.get(c) for c in cols])


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "summarize":
        try:
            rows = read_table(args.table)
            agg = summarize(rows, [k.strip() for k in args.by.split(",") if k.strip()])
        except (OSError, KeyError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        _write_rows(agg, sys.stdout)
        return EXIT_OK

    try:
        cfg = load_scenario(args.config)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"{args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print(f"{args.config}: ok ({cfg.kind}, {len(cells(cfg))} episodes, hash {cfg.digest()})")
        return EXIT_OK

    if args.parallel < 1:
        print("error: --parallel must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    rows = run_suite(cfg, parallelism=args.parallel, out_dir=args.out, seed_offset=args.seed_offset)
    aborted = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} episodes, {aborted} aborted; table: {args.out / 'results.csv'}")
    return EXIT_ABORTED if aborted else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
