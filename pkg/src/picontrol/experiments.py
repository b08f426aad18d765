"""Run seed sweeps and parameter grids, and aggregate the result tables.

Every (grid point, controller, seed) cell is one episode.  Cells are
numbered in a canonical order and the table is written in that order,
whatever order the worker pool finishes them in.
"""

from __future__ import annotations

import csv
import json
import math
import os
from collections.abc import Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Any

import numpy as np

from .config import ScenarioConfig, dump_scenario
from .scenarios import run_episode

FIXED_COLUMNS = ["cell", "scenario", "point", "controller", "seed", "status", "crash", "total_cost", "mean_ess", "steps"]


@dataclass(frozen=True)
class Cell:
    index: int
    point: str
    controller: str
    seed: int


def cells(cfg: ScenarioConfig, seed_offset: int = 0) -> list[tuple[Cell, ScenarioConfig]]:
    """All episodes of a suite in canonical order: point, then controller, then seed."""
    out = []
    for label, point_cfg in cfg.points():
        for ctrl in point_cfg.controllers:
            for seed in point_cfg.seeds:
                out.append((Cell(len(out), label, ctrl, seed + seed_offset), point_cfg))
    return out


def _run_cell(args: tuple[Cell, dict[str, Any], str | None]) -> dict[str, Any]:
    cell, cfg_dict, out_dir = args
    cfg = ScenarioConfig.model_validate(cfg_dict)
    log, row = run_episode(cfg, cell.controller, cell.seed)
    row = {"cell": cell.index, "point": cell.point, **row}
    if out_dir is not None:
        base = Path(out_dir) / "episodes" / f"{cell.index:04d}_{cell.point}_{cell.controller}_s{cell.seed}"
        log.write_csv(base.with_suffix(".csv"))
        log.write_summary(base.with_suffix(".summary.txt"))
    return row


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def run_suite(
    cfg: ScenarioConfig,
    parallelism: int = 1,
    out_dir: str | Path | None = None,
    seed_offset: int = 0,
) -> list[dict[str, Any]]:
    """Run every cell of ``cfg``; returns the rows in cell order.

    With ``out_dir`` the result table, per-episode logs and a manifest are
    written there.  A failing episode yields an ``aborted`` row and the
    suite goes on.
    """
    todo = cells(cfg, seed_offset)
    if out_dir is not None:
        (Path(out_dir) / "episodes").mkdir(parents=True, exist_ok=True)
    jobs = [(c, pc.to_dict(), None if out_dir is None else str(out_dir)) for c, pc in todo]
    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(parallelism, len(jobs))) as pool:
            rows = list(pool.map(_run_cell, jobs))
    else:
        rows = [_run_cell(j) for j in jobs]
    rows.sort(key=lambda r: r["cell"])
    if out_dir is not None:
        write_table(rows, Path(out_dir) / "results.csv")
        manifest = {
            "tool": "picontrol",
            "version": tool_version(),
            "config_hash": cfg.digest(),
            "seed_offset": seed_offset,
            "cells": len(rows),
            "aborted": sum(r["status"] != "ok" for r in rows),
        }
        (Path(out_dir) / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        (Path(out_dir) / "config.yaml").write_text(dump_scenario(cfg))
    return rows


# ---------------------------------------------------------------------------
# Tables


def columns(rows: Sequence[dict[str, Any]]) -> list[str]:
    extra: list[str] = []
    for r in rows:
        for k in r:
            if k not in FIXED_COLUMNS and k != "wall_clock" and k not in extra:
                extra.append(k)
    return FIXED_COLUMNS + extra + ["wall_clock"]


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(rows: Sequence[dict[str, Any]], path: str | Path) -> None:
    cols = columns(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in cols])


def _parse(v: str) -> Any:
    if v == "":
        return None
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_table(path: str | Path) -> list[dict[str, Any]]:
    with open(path, newline="") as fh:
        return [{k: _parse(v) for k, v in r.items()} for r in csv.DictReader(fh)]


_RATE_COLUMNS = {"crash", "captured", "goal_reached", "single_rotation"}


def summarize(rows: Sequence[dict[str, Any]], group_keys: Iterable[str]) -> list[dict[str, Any]]:
    """Group ``rows`` and aggregate: mean and population std of numeric columns,
    rates with denominators for flag columns, counts for categorical ones.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("summarize needs a non-empty table")
    keys = list(group_keys)
    for k in keys:
        if k not in rows[0]:
            raise KeyError(f"unknown group key {k!r}")
    groups: dict[tuple, list[dict[str, Any]]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    skip = set(keys) | {"cell", "seed", "wall_clock"}
    out = []
    for gkey, members in groups.items():
        agg: dict[str, Any] = dict(zip(keys, gkey))
        agg["n"] = len(members)
        for col in columns(members):
            if col in skip:
                continue
            vals = [m.get(col) for m in members]
            if col in _RATE_COLUMNS:
                flags = [bool(v) for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
                agg[col] = f"{(sum(flags) / len(flags)) if flags else math.nan:.4g} ({len(flags)})"
            elif all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals if v is not None):
                nums = np.array([v for v in vals if v is not None], dtype=np.float64)
                nums = nums[np.isfinite(nums)]
                agg[f"{col}_mean"] = float(np.mean(nums)) if nums.size else math.nan
                agg[f"{col}_std"] = float(np.std(nums)) if nums.size else math.nan
            else:
                counts: dict[str, int] = {}
                for v in vals:
                    counts[str(v)] = counts.get(str(v), 0) + 1
                agg[col] = ";".join(f"{k}={counts[k]}" for k in sorted(counts))
        out.append(agg)
    return out


def default_parallelism() -> int:
    return max(1, (os.cpu_count() or 1))
