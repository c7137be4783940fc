"""Deterministic training runs, checkpoint restore and WSD decay fork-off."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import os
from collections import OrderedDict

import numpy as np

from .. import autodiff as ad
from .._validation import ConfigError, single_threaded
from ..dynamics import PROBE_COLUMNS, ProbeRecorder
from ..model import build_model, count_params
from ..optim import Adam, OptimizerFault
from ..schedule import batch_size_at, lr_at
from ..tokenizer import load_tokenizer
from .checkpoint import Checkpoint, json_safe, load_checkpoint, save_checkpoint
from .config import ExperimentSpec, dump_spec
from .data import MixtureSampler, eval_set, source_from_spec

__all__ = [
    "METRIC_COLUMNS",
    "RunFault",
    "RunRecord",
    "TrainingRun",
    "run_experiment",
    "resume_run",
    "fork_decay",
    "load_run",
]

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "batch_tokens", "train_loss", "eval_loss", "eval_loss_per_byte",
                  "tokens_seen") + PROBE_COLUMNS


class RunFault(RuntimeError):
    """Training hit a non-finite loss or gradient; a diagnostic checkpoint was written."""

    def __init__(self, msg: str, checkpoint: str | None = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclasses.dataclass
class RunRecord:
    run_id: str
    run_dir: str
    metrics_path: str
    final_checkpoint: str | None
    status: str = "ok"
    n_params: int = 0
    spec_digest: str = ""
    checkpoints: list = dataclasses.field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self) -> None:
        with open(os.path.join(self.run_dir, "run.json"), "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


def load_run(run_dir: str) -> RunRecord:
    path = os.path.join(run_dir, "run.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{run_dir}: no run.json")
    with open(path) as f:
        d = json.load(f)
    d["run_dir"] = run_dir
    d["metrics_path"] = os.path.join(run_dir, os.path.basename(d["metrics_path"]))
    return RunRecord(**d)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class TrainingRun:
    """One experiment's mutable training state.

    ``probe_recorder`` is the slot :func:`windtunnel.dynamics.attach_probes`
    fills; with ``spec.probe_cadence > 0`` it is created automatically.
    """

    def __init__(self, spec: ExperimentSpec, run_dir: str):
        spec.validate_paths()
        self.spec = spec
        self.run_dir = run_dir
        self.tokenizer = load_tokenizer(spec.resolve(spec.tokenizer)) if spec.tokenizer else None
        vocab_needed = 256 if self.tokenizer is None else self.tokenizer.vocab_size
        if spec.model.vocab < vocab_needed:
            raise ConfigError(f"model vocab {spec.model.vocab} < tokenizer vocab {vocab_needed}")
        self.model = build_model(spec.model.replace(seed=spec.seed))
        needed = []
        for stage in ("stable", "decay", "sft"):
            needed.extend(n for n in spec.mixture(stage) if n not in needed)
        needed.extend(n for n in spec.eval.sources if n not in needed)
        self.sources = OrderedDict((n, source_from_spec(spec, n, self.tokenizer)) for n in needed)
        self.sampler = MixtureSampler(self.sources, spec.seed)
        self.eval_windows, eval_bytes = eval_set(self.sources, spec.eval.sources, spec.eval.windows)
        self.eval_target_bytes = int(eval_bytes[:, 1:].sum())
        o = spec.optimizer
        self.optimizer = Adam(o.beta1, o.beta2, o.eps, o.weight_decay, o.clip_norm)
        self.multipliers = {n: m for n, _, m in self.model.param_groups()}
        self.decay_mask = {n: (p.ndim == 2 and not self.model.is_embedding(n)) for n, p in self.model.named_parameters()}
        self.probe_recorder = ProbeRecorder(spec.probe_cadence) if spec.probe_cadence > 0 else None
        self.step = 0
        self.tokens_seen = 0
        self.rows: list[str] = [",".join(METRIC_COLUMNS)]
        self.probe_lines: list[str] = []
        self.checkpoints: list[str] = []
        self.extra_state: dict = {}

    # -- schedule -------------------------------------------------------

    def stage(self, s: int) -> str:
        sched = self.spec.schedule
        if s > sched.S:
            return "sft"
        return "decay" if sched.kind == "wsd" and s > sched.T else "stable"

    def lr(self, s: int) -> float:
        if s > self.spec.schedule.S:
            return self.spec.sft.lr
        return lr_at(self.spec.schedule, s)

    # -- core -----------------------------------------------------------

    def evaluate(self) -> tuple[float, float]:
        losses = self.model.token_losses(self.eval_windows)
        total = math.fsum(losses.reshape(-1).tolist())
        return total / losses.size, total / self.eval_target_bytes

    def train_step(self) -> dict:
        s = self.step + 1
        spec = self.spec
        stage = self.stage(s)
        lr = self.lr(s)
        n_seq = max(1, batch_size_at(spec.batch_ramp, s) // spec.seq_len)
        windows, _ = self.sampler.sample(n_seq, spec.mixture(stage), stage)
        self.model.zero_grad()
        loss = self.model.loss_on_windows(windows)
        train_loss = float(loss.data)
        if not math.isfinite(train_loss):
            self._fault(s, f"non-finite training loss at step {s}")
        ad.backward(loss)
        params = OrderedDict((n, p.data) for n, p in self.model.named_parameters())
        grads = OrderedDict((n, p.grad) for n, p in self.model.named_parameters())
        probe = self.probe_recorder.observe(s, params, grads) if self.probe_recorder is not None else None
        try:
            self.optimizer.step(params, grads, lr, self.multipliers, self.decay_mask)
        except OptimizerFault as e:
            self._fault(s, str(e))
        self.model.zero_grad()
        self.step = s
        self.tokens_seen += n_seq * spec.seq_len
        row = {"step": s, "lr": lr, "batch_tokens": n_seq * spec.seq_len, "train_loss": train_loss,
               "eval_loss": None, "eval_loss_per_byte": None, "tokens_seen": self.tokens_seen}
        if s % spec.eval.every == 0 or s == spec.total_steps:
            row["eval_loss"], row["eval_loss_per_byte"] = self.evaluate()
        probe_row = probe.row() if probe is not None else {}
        for c in PROBE_COLUMNS:
            row[c] = probe_row.get(c)
        self.rows.append(",".join(_fmt(row[c]) for c in METRIC_COLUMNS))
        if probe is not None:
            rec = {"step": s, **{k: probe_row[k] for k in PROBE_COLUMNS},
                   "max_update_by_matrix": probe.max_update, "max_abs_update_by_matrix": probe.max_abs_update}
            self.probe_lines.append(json.dumps(rec, sort_keys=True, allow_nan=True))
        return row

    def _fault(self, s: int, msg: str):
        path = self.save_checkpoint(reason="diagnostic", note=msg)
        raise RunFault(msg, path)

    # -- persistence ----------------------------------------------------

    def metrics_text(self) -> str:
        return "\n".join(self.rows) + "\n"

    def probes_text(self) -> str:
        return "".join(line + "\n" for line in self.probe_lines)

    def snapshot(self, reason: str = "scheduled", note: str | None = None) -> Checkpoint:
        arrays = OrderedDict()
        for n, p in self.model.named_parameters():
            arrays[f"model/{n}"] = p.data
        opt = self.optimizer.state_dict()
        for n, a in opt["m"].items():
            arrays[f"adam_m/{n}"] = a
        for n, a in opt["v"].items():
            arrays[f"adam_v/{n}"] = a
        probe_state = self.probe_recorder.state_dict() if self.probe_recorder is not None else None
        if probe_state is not None:
            for n, a in probe_state["params"].items():
                arrays[f"probe_params/{n}"] = a
            arrays["probe_grad"] = probe_state["grad"]
        state = {
            "spec": self.spec.to_dict(),
            "base_dir": self.spec.base_dir,
            "config_digest": self.spec.digest(),
            "schedule_position": {"step": self.step, "phase": self.stage(self.step) if self.step else "stable"},
            "optimizer": {k: v for k, v in opt.items() if k not in ("m", "v")},
            "sampler": self.sampler.state_dict(),
            "tokens_seen": self.tokens_seen,
            "probe_step": None if probe_state is None else probe_state["step"],
            "reason": reason,
            "note": note,
            **self.extra_state,
        }
        return Checkpoint(self.step, arrays, json_safe(state), self.metrics_text(), self.probes_text())

    def save_checkpoint(self, reason: str = "scheduled", note: str | None = None) -> str:
        path = save_checkpoint(os.path.join(self.run_dir, "checkpoints"), self.snapshot(reason, note))
        self.checkpoints.append(path)
        return path

    def restore(self, ckpt: Checkpoint) -> None:
        saved = ExperimentSpec.from_dict(ckpt.state["spec"], base_dir=ckpt.state.get("base_dir", "."))
        if saved.model.replace(seed=0) != self.spec.model.replace(seed=0):
            raise ConfigError("checkpoint model config does not match the spec")
        self.model.load_state_dict(ckpt.group("model"))
        opt = dict(ckpt.state["optimizer"])
        opt["m"], opt["v"] = ckpt.group("adam_m"), ckpt.group("adam_v")
        self.optimizer.load_state_dict(opt)
        self.sampler.load_state_dict(ckpt.state["sampler"])
        if self.probe_recorder is not None:
            ps = ckpt.state.get("probe_step")
            self.probe_recorder.load_state_dict(
                None if ps is None else {"step": ps, "params": ckpt.group("probe_params"), "grad": ckpt.arrays["probe_grad"]})
        self.step = int(ckpt.step)
        self.tokens_seen = int(ckpt.state["tokens_seen"])
        self.rows = ckpt.metrics_csv.rstrip("\n").split("\n")
        self.probe_lines = [ln for ln in ckpt.probes_jsonl.split("\n") if ln]

    # -- loop -----------------------------------------------------------

    def run(self, until: int | None = None) -> RunRecord:
        until = self.spec.total_steps if until is None else until
        os.makedirs(self.run_dir, exist_ok=True)
        dump_spec(self.spec, os.path.join(self.run_dir, "spec.yaml"))
        metrics_path = os.path.join(self.run_dir, "metrics.csv")
        record = RunRecord(
            run_id=os.path.basename(os.path.normpath(self.run_dir)),
            run_dir=self.run_dir,
            metrics_path=metrics_path,
            final_checkpoint=None,
            n_params=count_params(self.spec.model),
            spec_digest=self.spec.digest(),
        )
        ckpt_steps = set(self.spec.checkpoints)
        with single_threaded():
            try:
                with open(metrics_path, "w", newline="") as f:
                    f.write(self.metrics_text())
                    while self.step < until:
                        self.train_step()
                        f.write(self.rows[-1] + "\n")
                        f.flush()
                        if self.step in ckpt_steps:
                            self.save_checkpoint()
            except RunFault as e:
                record.status, record.error = "fault", str(e)
                record.final_checkpoint = e.checkpoint
                record.checkpoints = list(self.checkpoints)
                self._write_outputs(record)
                raise
            record.final_checkpoint = self.save_checkpoint(reason="final")
        record.checkpoints = list(self.checkpoints)
        self._write_outputs(record)
        return record

    def _write_outputs(self, record: RunRecord) -> None:
        with open(record.metrics_path, "w", newline="") as f:
            f.write(self.metrics_text())
        with open(os.path.join(self.run_dir, "probes.jsonl"), "w") as f:
            f.write(self.probes_text())
        counts = self.sampler.counts
        with open(os.path.join(self.run_dir, "mixture_counts.json"), "w") as f:
            json.dump(counts, f, indent=2, sort_keys=True)
        record.save()


def run_experiment(spec: ExperimentSpec, run_dir: str) -> RunRecord:
    """Train ``spec`` from scratch into ``run_dir``."""
    return TrainingRun(spec, run_dir).run()


def _spec_from_checkpoint(ckpt: Checkpoint) -> ExperimentSpec:
    return ExperimentSpec.from_dict(ckpt.state["spec"], base_dir=ckpt.state.get("base_dir", "."))


def resume_run(checkpoint: str, run_dir: str, until: int | None = None) -> RunRecord:
    """Continue the checkpoint's own run; the result matches the uninterrupted run byte for byte."""
    ckpt = load_checkpoint(checkpoint)
    run = TrainingRun(_spec_from_checkpoint(ckpt), run_dir)
    run.restore(ckpt)
    return run.run(until)


def fork_decay(checkpoint: str, run_dir: str, end_step: int, half_life: float | None = None,
               mixture: dict | None = None) -> RunRecord:
    """Branch an exponential decay off a stable-stage checkpoint.

    The fork keeps the plateau rate for the first step after the checkpoint
    (its stable stage ends at ``k + 1``) and then decays with ``half_life``
    (default: a tenth of the decay length) until ``end_step``.  The donor
    checkpoint is only read.
    """
    ckpt = load_checkpoint(checkpoint)
    donor = _spec_from_checkpoint(ckpt)
    sched = donor.schedule
    k = int(ckpt.step)
    if sched.kind != "wsd":
        raise ConfigError(f"fork_decay needs a WSD donor, got {sched.kind!r}")
    if k > sched.T:
        raise ConfigError(f"checkpoint at step {k} lies in the decay phase (T={sched.T}); refusing to fork")
    if k < sched.W:
        raise ConfigError(f"checkpoint at step {k} lies in warmup (W={sched.W}); refusing to fork")
    T = k + 1
    if end_step <= T:
        raise ConfigError(f"end_step must exceed {T}")
    if half_life is None:
        half_life = 0.1 * (end_step - T)
    corpus = dict(donor.corpus)
    if mixture is not None:
        corpus["decay"] = dict(mixture)
    spec = donor.replace(
        name=f"{donor.name}-fork{k}-{end_step}",
        schedule=sched.replace(T=T, S=end_step, half_life=float(half_life)),
        corpus=corpus,
        sft=None,
        checkpoints=tuple(c for c in donor.checkpoints if k < c <= end_step),
    )
    run = TrainingRun(spec, run_dir)
    run.restore(ckpt)
    run.extra_state = {"fork": {"donor": os.path.abspath(checkpoint), "donor_digest": ckpt.digest, "step": k}}
    return run.run()
