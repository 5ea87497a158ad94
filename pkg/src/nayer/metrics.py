"""Evaluation quantities: diversity score, convergence time, runtime totals."""

from __future__ import annotations

import json
import math
import os

import torch

from .errors import ShapeError
from .utils import generator_from

NOT_CONVERGED = math.inf

# Above this many cross pairs, diversity subsamples the old rows.
MAX_EXHAUSTIVE_PAIRS = 1_000_000


def diversity_score(new: torch.Tensor, old: torch.Tensor) -> float:
    """Mean L2 distance over all (new_i, old_j) feature pairs."""
    if new.ndim != 2 or old.ndim != 2:
        raise ShapeError("feature sets must be 2-D (N, d) matrices")
    if new.shape[0] == 0 or old.shape[0] == 0:
        raise ShapeError("feature sets must be non-empty")
    if new.shape[1] != old.shape[1]:
        raise ShapeError(f"feature widths differ: {new.shape[1]} vs {old.shape[1]}")
    return float(torch.cdist(new.to(torch.float64), old.to(torch.float64)).mean())


def bounded_diversity_score(new: torch.Tensor, old: torch.Tensor, seed: int = 0,
                            max_pairs: int = MAX_EXHAUSTIVE_PAIRS) -> float:
    """diversity_score with the old set subsampled once the pair count explodes."""
    if new.shape[0] * old.shape[0] > max_pairs:
        keep = max(1, max_pairs // max(1, new.shape[0]))
        idx = torch.randperm(old.shape[0], generator=generator_from("diversity-subsample", seed))[:keep]
        old = old[idx]
    return diversity_score(new, old)


def validate_convergence_log(log: list[tuple[int, float]]) -> None:
    if not log:
        raise ShapeError("convergence log is empty")
    last = None
    for idx, ce in log:
        if not math.isfinite(ce) or ce < 0:
            raise ShapeError(f"round {idx}: CE value {ce} is not a finite non-negative number")
        if last is not None and idx <= last:
            raise ShapeError("round indices must be strictly increasing")
        last = idx


def convergence_time(log: list[tuple[int, float]], threshold: float = 0.1) -> float:
    """1-based position of the first round whose final-step CE drops below
    the threshold; ``NOT_CONVERGED`` (inf) when no round ever qualifies."""
    validate_convergence_log(log)
    for position, (_idx, ce) in enumerate(log, start=1):
        if ce < threshold:
            return float(position)
    return NOT_CONVERGED


def runtime_report(run_dir: str) -> dict[str, float]:
    """Per-phase wall-clock totals from a run directory's metric log."""
    log_path = os.path.join(run_dir, "metrics.jsonl")
    if not os.path.exists(log_path):
        raise ShapeError(f"no metric log under {run_dir}")
    totals = {"generation_seconds": 0.0, "student_seconds": 0.0, "eval_seconds": 0.0}
    with open(log_path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("phase") != "epoch":
                continue
            timing = rec.get("timing", {})
            for key in totals:
                totals[key] += float(timing.get(key, 0.0))
    totals["total_seconds"] = sum(totals.values())
    return totals
