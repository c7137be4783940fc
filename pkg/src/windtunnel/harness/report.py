"""JSON reports over completed runs."""

from __future__ import annotations

import csv
import hashlib
import math
import os
from collections import defaultdict
from typing import Sequence

import numpy as np
import yaml

from ..scalinglaw import RunPoint, compute_optimal, fit_envelope, fit_nd_scaling, fit_optimal_batchsize
from .train import METRIC_COLUMNS, RunRecord

__all__ = ["SCHEMA_VERSION", "REPORT_KINDS", "IngestionError", "read_metrics", "final_eval", "report"]

SCHEMA_VERSION = 1
REPORT_KINDS = ("wsd-vs-cosine", "lr-stability", "batchsize", "scaling", "envelope", "decay-sufficiency")


class IngestionError(ValueError):
    """A metrics file does not follow the documented schema."""


def read_metrics(path: str) -> dict[str, np.ndarray]:
    """Parse a metrics CSV into float columns (empty cells become NaN)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty metrics file") from None
        for col in METRIC_COLUMNS:
            if col not in header:
                raise IngestionError(f"{path}: missing column {col!r}")
        for col in header:
            if col not in METRIC_COLUMNS:
                raise IngestionError(f"{path}: unexpected column {col!r}")
        rows = list(reader)
    out = {}
    for j, col in enumerate(header):
        vals = []
        for i, r in enumerate(rows):
            cell = r[j] if j < len(r) else ""
            try:
                vals.append(float(cell) if cell != "" else math.nan)
            except ValueError:
                raise IngestionError(f"{path}: row {i + 2}, column {col!r}: not a number: {cell!r}") from None
        out[col] = np.array(vals)
    return out


def final_eval(metrics: dict, column: str = "eval_loss") -> float:
    col = metrics[column]
    ok = np.flatnonzero(~np.isnan(col))
    if ok.size == 0:
        raise IngestionError(f"no {column} values recorded")
    return float(col[ok[-1]])


def _run_spec(rec: RunRecord) -> dict:
    path = os.path.join(rec.run_dir, "spec.yaml")
    if not os.path.exists(path):
        return {}
    with open(path) as f:
        return yaml.safe_load(f) or {}


def _digest(path: str) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _series(m: dict) -> dict:
    ok = ~np.isnan(m["eval_loss"])
    return {
        "step": m["step"].astype(int).tolist(),
        "lr": m["lr"].tolist(),
        "train_loss": m["train_loss"].tolist(),
        "eval_step": m["step"][ok].astype(int).tolist(),
        "eval_loss": m["eval_loss"][ok].tolist(),
    }


def _wsd_vs_cosine(runs) -> dict:
    rows, by_kind = [], defaultdict(dict)
    for rec, spec, m in runs:
        kind = spec.get("schedule", {}).get("kind", "?")
        seed = spec.get("seed")
        fl = final_eval(m)
        by_kind[kind][seed] = fl
        rows.append({"run_id": rec.run_id, "schedule": kind, "seed": seed, "final_eval_loss": fl, "series": _series(m)})
    pairs = []
    for seed, w in by_kind.get("wsd", {}).items():
        for other in ("cosine", "cosine_loop"):
            if seed in by_kind.get(other, {}):
                c = by_kind[other][seed]
                pairs.append({"seed": seed, "against": other, "wsd": w, "other": c, "delta": w - c})
    return {"runs": rows, "pairs": pairs,
            "mean_delta": float(np.mean([p["delta"] for p in pairs])) if pairs else None}


def _lr_stability(runs) -> dict:
    table = defaultdict(lambda: defaultdict(dict))   # (mup) -> d_m -> lr -> {seed: loss}
    for rec, spec, m in runs:
        model, sched = spec["model"], spec["schedule"]
        table[bool(model.get("mup", True))][int(model["d_m"])].setdefault(float(sched["eta"]), {})[spec.get("seed")] = final_eval(m)
    out = {}
    for mup, widths in sorted(table.items()):
        lrs = sorted({lr for w in widths.values() for lr in w})
        seeds = sorted({s for w in widths.values() for d in w.values() for s in d}, key=str)
        per_width = {}
        for d_m, by_lr in sorted(widths.items()):
            mean = {lr: float(np.mean(list(by_lr[lr].values()))) for lr in by_lr}
            best = min(mean, key=lambda lr: (mean[lr], lr))
            per_seed = {}
            for s in seeds:
                vals = {lr: v[s] for lr, v in by_lr.items() if s in v}
                if vals:
                    per_seed[str(s)] = min(vals, key=lambda lr: (vals[lr], lr))
            per_width[str(d_m)] = {"mean_loss_by_lr": {repr(k): v for k, v in sorted(mean.items())},
                                   "argmin_lr": best, "argmin_index": lrs.index(best),
                                   "argmin_lr_by_seed": per_seed}
        idx = [w["argmin_index"] for w in per_width.values()]
        seed_shift = {}
        for s in seeds:
            ii = [lrs.index(w["argmin_lr_by_seed"][str(s)]) for w in per_width.values() if str(s) in w["argmin_lr_by_seed"]]
            if ii:
                seed_shift[str(s)] = max(ii) - min(ii)
        out["mup_on" if mup else "mup_off"] = {
            "lr_grid": lrs,
            "widths": per_width,
            "argmin_shift_steps": max(idx) - min(idx),
            "argmin_shift_steps_by_seed": seed_shift,
        }
    return out


def _batchsize(runs, levels=None) -> dict:
    curves = []
    for rec, spec, m in runs:
        bs = int(np.median(m["batch_tokens"]))
        curves.append((bs, m["train_loss"], m["tokens_seen"]))
    law = fit_optimal_batchsize(curves, levels=levels)
    return {"A": law.A, "p": law.p, "levels": law.levels, "optimal_batch_sizes": law.optimal_batch_sizes,
            "batch_sizes": sorted({c[0] for c in curves})}


def _points(runs, column: str) -> list[RunPoint]:
    return [RunPoint(N=float(rec.n_params), D=float(m["tokens_seen"][-1]), loss=final_eval(m, column), tag=rec.run_id)
            for rec, _, m in runs]


def _scaling(runs, column: str, compute: Sequence[float] | None) -> dict:
    fit = fit_nd_scaling(_points(runs, column))
    out = {"fit": fit.to_dict(), "loss_column": column}
    if compute and fit.converged:
        out["compute_optimal"] = [dict(zip(("C", "N_opt", "D_opt", "ratio"), (c, *compute_optimal(fit, c))))
                                  for c in compute]
    return out


def _envelope(runs, column: str) -> dict:
    pts = sorted(((p.C, p.loss) for p in _points(runs, column)))
    C = np.array([c for c, _ in pts])
    L = np.array([l for _, l in pts])
    ex, pw, pref = fit_envelope(C, L)
    return {"exponential": ex.__dict__, "power": pw.__dict__, "preferred": pref,
            "points": [{"C": c, "loss": l} for c, l in pts]}


def _decay_sufficiency(runs) -> dict:
    rows = []
    for rec, spec, m in runs:
        sched = spec["schedule"]
        S, T = int(sched["S"]), int(sched["T"])
        rows.append({"run_id": rec.run_id, "seed": spec.get("seed"), "decay_steps": S - T,
                     "decay_fraction": (S - T) / S, "final_eval_loss": final_eval(m)})
    rows.sort(key=lambda r: (str(r["seed"]), r["decay_steps"]))
    return {"table": rows}


def report(records: Sequence[RunRecord], kind: str, *, column: str = "eval_loss", levels=None,
           compute: Sequence[float] | None = None) -> dict:
    """Aggregate completed runs into a versioned JSON-ready dict."""
    if kind not in REPORT_KINDS:
        raise ValueError(f"unknown report kind {kind!r}; expected one of {REPORT_KINDS}")
    if not records:
        raise ValueError("report needs at least one run")
    runs = [(r, _run_spec(r), read_metrics(r.metrics_path)) for r in records if r.status == "ok"]
    if not runs:
        raise ValueError("no successful runs to report on")
    if kind == "wsd-vs-cosine":
        result = _wsd_vs_cosine(runs)
    elif kind == "lr-stability":
        result = _lr_stability(runs)
    elif kind == "batchsize":
        result = _batchsize(runs, levels)
    elif kind == "scaling":
        result = _scaling(runs, column, compute)
    elif kind == "envelope":
        result = _envelope(runs, column)
    else:
        result = _decay_sufficiency(runs)
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "runs": [{"run_id": r.run_id, "metrics_digest": _digest(r.metrics_path), "spec_digest": r.spec_digest}
                 for r, _, _ in runs],
        "result": result,
    }
