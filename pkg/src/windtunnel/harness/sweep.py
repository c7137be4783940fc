"""Grid sweeps over experiment specs."""

from __future__ import annotations

import concurrent.futures as cf
import itertools
import json
import os
import re
import traceback
from typing import Any, Mapping, Sequence

from .config import ExperimentSpec, apply_override
from .train import RunRecord, run_experiment

__all__ = ["expand_grid", "sweep"]


def expand_grid(grid: Mapping[str, Sequence[Any]], base: ExperimentSpec) -> list[tuple[dict, ExperimentSpec]]:
    """Cartesian product of ``grid`` applied to ``base``, in key order then value order."""
    keys = list(grid)
    out = []
    for values in itertools.product(*(list(grid[k]) for k in keys)):
        overrides = dict(zip(keys, values))
        spec = base
        for k, v in overrides.items():
            spec = apply_override(spec, k, v)
        out.append((overrides, spec))
    return out


def _run_id(i: int, overrides: dict) -> str:
    tag = "_".join(f"{k}={v}" for k, v in overrides.items())
    return f"{i:03d}-" + re.sub(r"[^A-Za-z0-9=._-]+", "-", tag)


def _run_one(spec: ExperimentSpec, run_dir: str) -> dict:
    try:
        return run_experiment(spec, run_dir).to_dict()
    except Exception as e:  # recorded, sweep continues
        os.makedirs(run_dir, exist_ok=True)
        rec = RunRecord(os.path.basename(run_dir), run_dir, os.path.join(run_dir, "metrics.csv"), None,
                        status="failed", spec_digest=spec.digest(),
                        error=f"{type(e).__name__}: {e}\n{traceback.format_exc(limit=3)}")
        rec.save()
        return rec.to_dict()


def sweep(grid: Mapping[str, Sequence[Any]], base: ExperimentSpec, out_dir: str, parallelism: int = 1) -> list[RunRecord]:
    """Run every grid point as an independent experiment under ``out_dir``.

    Runs are share-nothing, so the results do not depend on ``parallelism``.
    Failed runs are recorded with ``status="failed"``; ``summary.json``
    lists every run and its overrides.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    jobs = [(_run_id(i, ov), ov, spec) for i, (ov, spec) in enumerate(expand_grid(grid, base))]
    os.makedirs(out_dir, exist_ok=True)
    dirs = [os.path.join(out_dir, rid) for rid, _, _ in jobs]
    if parallelism == 1:
        results = [_run_one(spec, d) for (_, _, spec), d in zip(jobs, dirs)]
    else:
        with cf.ProcessPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(_run_one, [s for _, _, s in jobs], dirs))
    records = [RunRecord(**r) for r in results]
    summary = {
        "n_runs": len(records),
        "n_failed": sum(r.status != "ok" for r in records),
        "runs": [{"run_id": rid, "overrides": ov, "status": rec.status, "error": rec.error}
                 for (rid, ov, _), rec in zip(jobs, records)],
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, default=str)
    return records
