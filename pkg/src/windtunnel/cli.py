"""Command-line entry point.

Exit codes: 0 success, 1 usage or bad input, 2 run fault, 3 fit failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
import yaml

from ._validation import ConfigError, UnderdeterminedError
from .harness.checkpoint import CheckpointError
from .harness.config import load_spec
from .harness.report import REPORT_KINDS, IngestionError, report
from .harness.train import RunFault, load_run
from .optim import OptimizerFault
from .scalinglaw import FitError, RunPoint, compute_optimal, fit_envelope, fit_nd_scaling, fit_optimal_batchsize

EXIT_OK, EXIT_USAGE, EXIT_RUN, EXIT_FIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if out:
        with open(out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)


def _parse_mixture(text: str | None) -> dict | None:
    if not text:
        return None
    mix = {}
    for part in text.split(","):
        name, _, w = part.partition("=")
        if not w:
            raise UsageError(f"bad mixture entry {part!r}; expected name=weight")
        mix[name.strip()] = float(w)
    return mix


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        key, _, vals = item.partition("=")
        if not vals:
            raise UsageError(f"bad grid entry {item!r}; expected key=v1,v2,...")
        grid[key.strip()] = [yaml.safe_load(v) for v in vals.split(",")]
    return grid


def _expand_run_dirs(paths) -> list:
    dirs = []
    for p in paths:
        if os.path.exists(os.path.join(p, "summary.json")):
            with open(os.path.join(p, "summary.json")) as f:
                dirs.extend(os.path.join(p, r["run_id"]) for r in json.load(f)["runs"])
        else:
            dirs.append(p)
    return [load_run(d) for d in dirs]


# -- subcommands --------------------------------------------------------------


def cmd_train(args) -> int:
    from .harness.train import TrainingRun, resume_run

    if args.resume:
        rec = resume_run(args.resume, args.out, until=args.until)
    else:
        rec = TrainingRun(load_spec(args.config), args.out).run(args.until)
    print(json.dumps(rec.to_dict(), indent=2))
    return EXIT_OK


def cmd_fork(args) -> int:
    from .harness.train import fork_decay

    rec = fork_decay(args.checkpoint, args.out, end_step=args.end_step, half_life=args.half_life,
                     mixture=_parse_mixture(args.mixture))
    print(json.dumps(rec.to_dict(), indent=2))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness.sweep import sweep

    spec = load_spec(args.config)
    grid = _parse_grid(args.grid)
    if args.grid_file:
        with open(args.grid_file) as f:
            grid.update(yaml.safe_load(f) or {})
    if not grid:
        raise UsageError("sweep needs at least one --grid entry")
    recs = sweep(grid, spec, args.out, parallelism=args.parallel)
    failed = [r.run_id for r in recs if r.status != "ok"]
    print(json.dumps({"runs": len(recs), "failed": failed}, indent=2))
    return EXIT_RUN if failed else EXIT_OK


def _read_point_csv(path: str, cols) -> dict:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = [c for c in cols if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"{path}: missing column {missing[0]!r}")
        rows = list(reader)
    return {c: np.array([float(r[c]) for r in rows]) for c in cols}


def cmd_fit(args) -> int:
    csv_input = len(args.inputs) == 1 and os.path.isfile(args.inputs[0])
    if not csv_input:
        kind = {"batchsize": "batchsize", "scaling": "scaling", "envelope": "envelope"}[args.law]
        _emit(report(_expand_run_dirs(args.inputs), kind, column=args.column, compute=args.compute), args.out)
        return EXIT_OK
    path = args.inputs[0]
    if args.law == "scaling":
        d = _read_point_csv(path, ("N", "D", "loss"))
        fit = fit_nd_scaling([RunPoint(N=n, D=dd, loss=l) for n, dd, l in zip(d["N"], d["D"], d["loss"])])
        result = {"fit": fit.to_dict()}
        if args.compute and fit.converged:
            result["compute_optimal"] = [dict(zip(("C", "N_opt", "D_opt", "ratio"), (c, *compute_optimal(fit, c))))
                                         for c in args.compute]
        if not fit.converged:
            _emit({"schema_version": 1, "kind": "scaling", "result": result}, args.out)
            print("fit did not converge", file=sys.stderr)
            return EXIT_FIT
    elif args.law == "envelope":
        d = _read_point_csv(path, ("C", "loss"))
        ex, pw, pref = fit_envelope(d["C"], d["loss"])
        result = {"exponential": ex.__dict__, "power": pw.__dict__, "preferred": pref}
    else:
        d = _read_point_csv(path, ("batch_size", "tokens", "loss"))
        runs = []
        for bs in sorted(set(d["batch_size"].tolist())):
            sel = d["batch_size"] == bs
            runs.append((bs, d["loss"][sel], d["tokens"][sel]))
        law = fit_optimal_batchsize(runs)
        result = {"A": law.A, "p": law.p, "levels": law.levels, "optimal_batch_sizes": law.optimal_batch_sizes}
    _emit({"schema_version": 1, "kind": args.law, "input": os.path.abspath(path), "result": result}, args.out)
    return EXIT_OK


def cmd_quantize(args) -> int:
    from .harness.quantize import quantize_checkpoint

    rep = quantize_checkpoint(args.checkpoint, args.out, group_size=args.group_size, damping=args.damping,
                              method=args.method, calib_windows=args.calib_windows)
    print(json.dumps({"eval_loss": rep["eval_loss"], "out": args.out}, indent=2))
    return EXIT_OK


def cmd_tokenizer(args) -> int:
    from .tokenizer import compression_rate, encode, load_tokenizer, save_tokenizer, train_bpe

    if args.action == "train":
        docs = []
        for p in args.files:
            with open(p, "rb") as f:
                docs.append(f.read())
        model = train_bpe(docs, args.vocab, args.min_frequency)
        save_tokenizer(model, args.out)
        print(f"wrote {args.out}: vocab_size={model.vocab_size}")
        return EXIT_OK
    model = load_tokenizer(args.tokenizer)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["file", "bytes", "tokens", "bytes_per_token"])
    for p in args.files:
        with open(p, "rb") as f:
            data = f.read()
        if not data:
            raise UsageError(f"{p} is empty")
        n_tok = len(encode(model, data))
        w.writerow([p, len(data), n_tok, repr(compression_rate(model, data))])
    return EXIT_OK


def cmd_report(args) -> int:
    _emit(report(_expand_run_dirs(args.runs), args.kind, column=args.column, compute=args.compute), args.out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    from .harness.data import ingest_corpus

    c = ingest_corpus(args.path, args.tokenizer, args.out)
    print(json.dumps({"out": args.out, "n_tokens": int(c.tokens.size), "n_bytes": c.n_bytes, "digest": c.digest},
                     indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="windtunnel", description="Desk-scale model wind tunnel.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("config", nargs="?")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--resume", help="continue from this checkpoint instead of starting fresh")
    t.add_argument("--until", type=int, help="stop after this step")
    t.set_defaults(fn=cmd_train)

    f = sub.add_parser("fork-decay", help="branch an exponential decay off a stable checkpoint")
    f.add_argument("checkpoint")
    f.add_argument("--end-step", type=int, required=True)
    f.add_argument("--half-life", type=float)
    f.add_argument("--mixture", help="decay-stage mixture, e.g. a=0.6,b=0.4")
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_fork)

    s = sub.add_parser("sweep", help="run a grid of experiments")
    s.add_argument("config")
    s.add_argument("--grid", action="append", help="key=v1,v2,... (repeatable); keys are dotted spec paths, lr or d_m")
    s.add_argument("--grid-file", help="YAML mapping of key -> list of values")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sweep)

    fi = sub.add_parser("fit", help="fit a scaling law to run directories or a CSV of points")
    fi.add_argument("law", choices=("batchsize", "scaling", "envelope"))
    fi.add_argument("inputs", nargs="+", help="run/sweep directories, or one CSV (N,D,loss | C,loss | batch_size,tokens,loss)")
    fi.add_argument("--column", default="eval_loss", choices=("eval_loss", "eval_loss_per_byte"))
    fi.add_argument("--compute", type=float, nargs="*", help="compute budgets for the optimal allocation")
    fi.add_argument("--out")
    fi.set_defaults(fn=cmd_fit)

    q = sub.add_parser("quantize", help="int4-quantize a checkpoint")
    q.add_argument("checkpoint")
    q.add_argument("--out", required=True)
    q.add_argument("--group-size", type=int, default=32)
    q.add_argument("--damping", type=float, default=0.01)
    q.add_argument("--method", choices=("gptq", "rtn"), default="gptq")
    q.add_argument("--calib-windows", type=int, default=16)
    q.set_defaults(fn=cmd_quantize)

    tk = sub.add_parser("tokenizer", help="train a BPE tokenizer or measure compression")
    tsub = tk.add_subparsers(dest="action", parser_class=_Parser)
    tsub.required = True
    tt = tsub.add_parser("train")
    tt.add_argument("files", nargs="+")
    tt.add_argument("--vocab", type=int, required=True)
    tt.add_argument("--min-frequency", type=int, default=2)
    tt.add_argument("--out", required=True)
    tr = tsub.add_parser("rate")
    tr.add_argument("files", nargs="+")
    tr.add_argument("--tokenizer", required=True)
    tk.set_defaults(fn=cmd_tokenizer)

    r = sub.add_parser("report", help="aggregate runs into a JSON report")
    r.add_argument("kind", choices=REPORT_KINDS)
    r.add_argument("runs", nargs="+", help="run directories or sweep directories")
    r.add_argument("--column", default="eval_loss", choices=("eval_loss", "eval_loss_per_byte"))
    r.add_argument("--compute", type=float, nargs="*")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)

    ig = sub.add_parser("ingest", help="tokenize a corpus to disk")
    ig.add_argument("path")
    ig.add_argument("--tokenizer")
    ig.add_argument("--out", required=True)
    ig.set_defaults(fn=cmd_ingest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "train" and not args.config and not args.resume:
        parser.error("train needs a config file or --resume")
    try:
        return args.fn(args)
    except (RunFault, OptimizerFault) as e:
        print(f"run fault: {e}", file=sys.stderr)
        return EXIT_RUN
    except (FitError, UnderdeterminedError) as e:
        print(f"fit failure: {e}", file=sys.stderr)
        return EXIT_FIT
    except (UsageError, ConfigError, IngestionError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        if args.command in ("fit", "report"):
            print(f"fit failure: {e}", file=sys.stderr)
            return EXIT_FIT
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # anything else during a run is a fault
        print(f"run fault: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
