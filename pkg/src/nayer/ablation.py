"""Experiment matrices: sweep one axis over values x seeds, aggregate, emit CSV.

Axes: input_mode, nl_arch, sum_beta, memory_capacity, prompt_template and
gen_steps. The prompt_template axis materializes in the embedding source
(a per-prompt CSV path for kind=file; a prompt-derived seed for fallback
pools, since the fallback embedder has no text encoder to feed prompts to).
"""

from __future__ import annotations

import copy
import csv
import math
import os
import re
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .config import RunConfig
from .errors import ConfigError
from .utils import stable_seed

AXES = ("input_mode", "nl_arch", "sum_beta", "memory_capacity", "prompt_template", "gen_steps")

RUN_CSV_FIELDS = ("axis_value", "seed", "accuracy", "diversity", "convergence_rounds",
                  "wall_seconds", "status")


@dataclass
class AblationSpec:
    axis: str
    values: list
    base: RunConfig
    seeds: list[int]

    def validate(self) -> None:
        if self.axis not in AXES:
            raise ConfigError(f"unknown ablation axis {self.axis!r}; known: {', '.join(AXES)}")
        if not self.values:
            raise ConfigError("ablation values must be non-empty")
        if not self.seeds:
            raise ConfigError("ablation seeds must be non-empty")
        if self.axis == "sum_beta" and self.base.input_mode != "SUM":
            raise ConfigError("sum_beta axis requires a base config with input_mode=SUM")


@dataclass
class MatrixCell:
    axis: str
    value: object
    seed: int
    config: RunConfig


def _apply_axis(cfg: RunConfig, axis: str, value) -> None:
    if axis == "input_mode":
        cfg.input_mode = str(value)
        if cfg.input_mode != "SUM":
            cfg.sum_beta = None
    elif axis == "nl_arch":
        cfg.nl_arch = str(value)
    elif axis == "sum_beta":
        cfg.sum_beta = float(value)
    elif axis == "memory_capacity":
        cfg.memory_capacity = None if value in (None, "unbounded", "full") else int(value)
    elif axis == "gen_steps":
        cfg.schedule.gen_steps = int(value)
    elif axis == "prompt_template":
        if cfg.embedding.kind == "file":
            cfg.embedding.path = str(value)
        else:
            cfg.embedding.seed = stable_seed("prompt", value)
    else:
        raise ConfigError(f"unknown ablation axis {axis!r}")


def expand(spec: AblationSpec) -> list[MatrixCell]:
    """One full run config per (value, seed) pair; everything else from base."""
    spec.validate()
    cells = []
    for value in spec.values:
        for seed in spec.seeds:
            cfg = copy.deepcopy(spec.base)
            cfg.output_dir = None
            cfg.seed = int(seed)
            _apply_axis(cfg, spec.axis, value)
            cfg.validate()
            cells.append(MatrixCell(spec.axis, value, int(seed), cfg))
    return cells


def _slug(value) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", str(value))


def _run_cell(cell: MatrixCell) -> dict:
    from .distill import distill

    t0 = time.perf_counter()
    row = {"axis_value": str(cell.value), "seed": cell.seed, "accuracy": None,
           "diversity": None, "convergence_rounds": None, "wall_seconds": None, "status": "ok"}
    try:
        result = distill(cell.config)
        m = result.report["metrics"]
        row["accuracy"] = m["accuracy"]["final"]
        row["diversity"] = m["diversity"]
        row["convergence_rounds"] = m["convergence_rounds"]
    except Exception as exc:  # a failing cell must not sink the matrix
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    row["wall_seconds"] = time.perf_counter() - t0
    return row


def run_matrix(cells: list[MatrixCell], out_dir: str, jobs: int = 1) -> list[dict]:
    """Execute every cell, write runs.csv and summary.csv, return per-run rows."""
    if not cells:
        raise ConfigError("run_matrix needs at least one cell")
    os.makedirs(out_dir, exist_ok=True)
    for cell in cells:
        cell.config.output_dir = os.path.join(out_dir, f"{cell.axis}-{_slug(cell.value)}-s{cell.seed}")

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, cells))
    else:
        rows = [_run_cell(cell) for cell in cells]

    write_matrix_csv(rows, os.path.join(out_dir, "runs.csv"))
    _write_summary_csv(aggregate(rows), os.path.join(out_dir, "summary.csv"))
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_matrix_csv(rows: list[dict], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=RUN_CSV_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in RUN_CSV_FIELDS})


def read_matrix_csv(path: str) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for raw in csv.DictReader(fh):
            row = dict(raw)
            row["seed"] = int(row["seed"]) if row["seed"] else None
            for key in ("accuracy", "diversity", "convergence_rounds", "wall_seconds"):
                row[key] = float(row[key]) if row[key] else None
            rows.append(row)
    return rows


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 and all(math.isfinite(v) for v in values) else 0.0
    return mean, std


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean +/- std per axis value over its successful runs (std=0 for one seed)."""
    by_value: dict[str, list[dict]] = {}
    for row in rows:
        by_value.setdefault(row["axis_value"], []).append(row)
    table = []
    for value in sorted(by_value):
        group = by_value[value]
        ok = [r for r in group if r["status"] == "ok"]
        entry = {"axis_value": value, "runs": len(group), "failed": len(group) - len(ok)}
        for key in ("accuracy", "diversity", "convergence_rounds"):
            mean, std = _mean_std([r[key] for r in ok])
            entry[f"{key}_mean"] = mean
            entry[f"{key}_std"] = std
        table.append(entry)
    return table


def _write_summary_csv(table: list[dict], path: str) -> None:
    if not table:
        return
    fields = list(table[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for entry in table:
            writer.writerow({k: _fmt(entry.get(k)) for k in fields})
