"""Experiment specifications and their YAML grammar.

A config document looks like::

    name: wsd-demo
    seed: 0
    seq_len: 64
    model: {d_m: 96, d_ff: 240, d_h: 32, n_q: 3, n_kv: 3, n_layers: 3, vocab: 256}
    schedule: {kind: wsd, eta: 0.01, W: 100, T: 2700, S: 3000, half_life: 75}
    batch_ramp: [[1, 512]]          # (start step, tokens); a bare int means constant
    optimizer: {beta1: 0.9, beta2: 0.95, eps: 1.0e-8, weight_decay: 0.1, clip_norm: 1.0}
    sources:
      main: {synthetic: {seed: 7, n_bytes: 300000}}
      extra: {path: data/extra.txt}  # raw text file or an ``ingest`` output directory
    corpus:
      stable: {main: 1.0}
      decay: {main: 0.6, extra: 0.4}  # optional; defaults to the stable mixture
    sft: {steps: 100, lr: 0.001, mixture: {extra: 1.0}}   # optional
    eval: {sources: [main], every: 100, windows: 16, holdout: 0.05}
    probes: {cadence: 0}            # 0 disables probes
    checkpoints: [1000, 2000]
    tokenizer: null                 # path to a merges file; null = raw bytes

Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
import os
from typing import Any, Mapping

import yaml

from .._validation import ConfigError
from ..model import ModelConfig
from ..schedule import BatchRamp, ScheduleSpec

__all__ = [
    "OptimizerSpec",
    "SourceSpec",
    "EvalSpec",
    "SFTSpec",
    "ExperimentSpec",
    "load_spec",
    "dump_spec",
    "apply_override",
    "STAGES",
]

STAGES = ("stable", "decay", "sft")
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_SCHEDULE_FIELDS = {f.name for f in dataclasses.fields(ScheduleSpec)}


@dataclasses.dataclass(frozen=True)
class OptimizerSpec:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive and weight_decay non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or null")


@dataclasses.dataclass(frozen=True)
class SourceSpec:
    """Either a file/directory ``path`` or a ``synthetic`` Markov corpus description."""

    name: str
    path: str | None = None
    synthetic: Mapping[str, Any] | None = None

    def __post_init__(self):
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError(f"source {self.name!r} needs exactly one of path / synthetic")


@dataclasses.dataclass(frozen=True)
class EvalSpec:
    sources: tuple[str, ...] = ()
    every: int = 100
    windows: int = 16
    holdout: float = 0.05

    def __post_init__(self):
        if self.every < 1 or self.windows < 1:
            raise ConfigError("eval.every and eval.windows must be >= 1")
        if not 0 < self.holdout < 1:
            raise ConfigError("eval.holdout must lie in (0, 1)")


@dataclasses.dataclass(frozen=True)
class SFTSpec:
    """Optional stage after the schedule ends; its learning rate is explicit."""

    steps: int
    lr: float
    mixture: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.steps < 0 or not self.lr > 0:
            raise ConfigError("sft.steps must be >= 0 and sft.lr positive")


def _check_mixture(stage: str, mix: Mapping[str, float], sources) -> None:
    if not mix:
        raise ConfigError(f"{stage} mixture is empty")
    for name, w in mix.items():
        if name not in sources:
            raise ConfigError(f"{stage} mixture references unknown source {name!r}")
        if not w >= 0:
            raise ConfigError(f"{stage} mixture weight for {name!r} must be non-negative")
    if abs(math.fsum(mix.values()) - 1.0) > 1e-9:
        raise ConfigError(f"{stage} mixture weights sum to {math.fsum(mix.values())}, expected 1")


@dataclasses.dataclass(frozen=True)
class ExperimentSpec:
    name: str
    model: ModelConfig
    schedule: ScheduleSpec
    batch_ramp: BatchRamp
    sources: Mapping[str, SourceSpec]
    corpus: Mapping[str, Mapping[str, float]]
    seq_len: int = 64
    seed: int = 0
    optimizer: OptimizerSpec = OptimizerSpec()
    sft: SFTSpec | None = None
    eval: EvalSpec = EvalSpec()
    probe_cadence: int = 0
    checkpoints: tuple[int, ...] = ()
    tokenizer: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.seq_len < 1:
            raise ConfigError("seq_len must be >= 1")
        if self.seq_len > self.model.max_seq:
            raise ConfigError(f"seq_len {self.seq_len} exceeds model max_seq {self.model.max_seq}")
        if "stable" not in self.corpus:
            raise ConfigError("corpus needs a 'stable' mixture")
        for stage, mix in self.corpus.items():
            if stage not in STAGES:
                raise ConfigError(f"unknown corpus stage {stage!r}; expected one of {STAGES}")
            _check_mixture(stage, mix, self.sources)
        if self.sft is not None and self.sft.mixture is not None:
            _check_mixture("sft", self.sft.mixture, self.sources)
        for name in self.eval.sources:
            if name not in self.sources:
                raise ConfigError(f"eval references unknown source {name!r}")
        if self.probe_cadence < 0:
            raise ConfigError("probe cadence must be >= 0")
        if any(c < 1 or c > self.total_steps for c in self.checkpoints):
            raise ConfigError(f"checkpoint steps must lie in [1, {self.total_steps}]")

    @property
    def total_steps(self) -> int:
        return self.schedule.S + (self.sft.steps if self.sft else 0)

    def mixture(self, stage: str) -> Mapping[str, float]:
        if stage == "sft":
            if self.sft is not None and self.sft.mixture is not None:
                return self.sft.mixture
            return self.corpus.get("sft") or self.mixture("decay")
        if stage == "decay":
            return self.corpus.get("decay") or self.corpus["stable"]
        return self.corpus["stable"]

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def validate_paths(self) -> None:
        for src in self.sources.values():
            if src.path is not None and not os.path.exists(self.resolve(src.path)):
                raise ConfigError(f"source {src.name!r}: path {src.path!r} does not exist")
        if self.tokenizer is not None and not os.path.exists(self.resolve(self.tokenizer)):
            raise ConfigError(f"tokenizer file {self.tokenizer!r} does not exist")

    def replace(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, **changes)

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        model = dataclasses.asdict(self.model)
        sched = dataclasses.asdict(self.schedule)
        out = {
            "name": self.name,
            "seed": self.seed,
            "seq_len": self.seq_len,
            "model": model,
            "schedule": sched,
            "batch_ramp": [list(s) for s in self.batch_ramp.segments],
            "optimizer": dataclasses.asdict(self.optimizer),
            "sources": {
                n: ({"path": s.path} if s.path is not None else {"synthetic": dict(s.synthetic)})
                for n, s in self.sources.items()
            },
            "corpus": {k: dict(v) for k, v in self.corpus.items()},
            "eval": {**dataclasses.asdict(self.eval), "sources": list(self.eval.sources)},
            "probes": {"cadence": self.probe_cadence},
            "checkpoints": list(self.checkpoints),
            "tokenizer": self.tokenizer,
        }
        if self.sft is not None:
            out["sft"] = {"steps": self.sft.steps, "lr": self.sft.lr,
                          "mixture": None if self.sft.mixture is None else dict(self.sft.mixture)}
        return out

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: str = ".") -> "ExperimentSpec":
        d = copy.deepcopy(dict(d))
        known = {"name", "seed", "seq_len", "model", "schedule", "batch_ramp", "optimizer", "sources",
                 "corpus", "sft", "eval", "probes", "checkpoints", "tokenizer"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("model", "schedule", "sources", "corpus"):
            if key not in d:
                raise ConfigError(f"config is missing required key {key!r}")
        try:
            model = _build(ModelConfig, d["model"], _MODEL_FIELDS, "model")
            sched = _build(ScheduleSpec, d["schedule"], _SCHEDULE_FIELDS, "schedule")
            ramp = d.get("batch_ramp", 512)
            ramp = BatchRamp.constant(int(ramp)) if isinstance(ramp, (int, float)) else BatchRamp(ramp)
            opt = _build(OptimizerSpec, d.get("optimizer") or {}, {f.name for f in dataclasses.fields(OptimizerSpec)},
                         "optimizer")
            sources = {}
            for n, s in (d["sources"] or {}).items():
                s = dict(s or {})
                extra = set(s) - {"path", "synthetic"}
                if extra:
                    raise ConfigError(f"source {n!r}: unknown keys {sorted(extra)}")
                sources[n] = SourceSpec(n, s.get("path"), s.get("synthetic"))
            corpus = {k: {n: float(w) for n, w in (v or {}).items()} for k, v in d["corpus"].items()}
            sft = None
            if d.get("sft"):
                s = d["sft"]
                mix = s.get("mixture")
                sft = SFTSpec(int(s["steps"]), float(s["lr"]),
                              None if mix is None else {n: float(w) for n, w in mix.items()})
            ev = dict(d.get("eval") or {})
            ev_sources = tuple(ev.pop("sources", None) or tuple(corpus["stable"]))
            evs = EvalSpec(sources=ev_sources, **{k: (float(v) if k == "holdout" else int(v)) for k, v in ev.items()})
            return cls(
                name=str(d.get("name", "run")),
                model=model,
                schedule=sched,
                batch_ramp=ramp,
                sources=sources,
                corpus=corpus,
                seq_len=int(d.get("seq_len", 64)),
                seed=int(d.get("seed", 0)),
                optimizer=opt,
                sft=sft,
                eval=evs,
                probe_cadence=int((d.get("probes") or {}).get("cadence", 0)),
                checkpoints=tuple(int(c) for c in (d.get("checkpoints") or ())),
                tokenizer=d.get("tokenizer"),
                base_dir=base_dir,
            )
        except (TypeError, KeyError) as e:
            raise ConfigError(f"malformed config: {e}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


def _coerce(v):
    # YAML 1.1 reads "1e-8" as a string
    if isinstance(v, str):
        try:
            return float(v)
        except ValueError:
            return v
    return v


def _build(cls, d, fields, what):
    d = dict(d or {})
    unknown = set(d) - fields
    if unknown:
        raise ConfigError(f"{what}: unknown keys {sorted(unknown)}")
    return cls(**{k: _coerce(v) for k, v in d.items()})


def load_spec(path: str) -> ExperimentSpec:
    with open(path) as f:
        d = yaml.safe_load(f)
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return ExperimentSpec.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))


def dump_spec(spec: ExperimentSpec, path: str) -> None:
    d = spec.to_dict()
    # echo absolute paths so the copy is self-contained
    for s in d["sources"].values():
        if "path" in s:
            s["path"] = spec.resolve(s["path"])
    if d["tokenizer"] is not None:
        d["tokenizer"] = spec.resolve(d["tokenizer"])
    with open(path, "w") as f:
        yaml.safe_dump(d, f, sort_keys=False)


_ALIASES = {"lr": "schedule.eta", "eta": "schedule.eta"}


def apply_override(spec: ExperimentSpec, key: str, value) -> ExperimentSpec:
    """Return a copy of ``spec`` with one field changed.

    ``key`` is a dotted path into the config document (``schedule.eta``,
    ``model.n_layers``) or one of the aliases ``lr`` and ``d_m``.  ``d_m``
    rescales the model width keeping the head dimension and muP base.
    """
    if key == "d_m":
        return spec.replace(model=spec.model.with_width(int(value)))
    if key == "mup":
        return spec.replace(model=spec.model.replace(mup=bool(value)))
    key = _ALIASES.get(key, key)
    d = spec.to_dict()
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown spec field {key!r}")
        node = node[p]
    if not isinstance(node, dict) or (parts[-1] not in node and len(parts) == 1):
        raise ConfigError(f"unknown spec field {key!r}")
    if len(parts) > 1 and parts[0] in ("model", "schedule") and parts[-1] not in node:
        raise ConfigError(f"unknown spec field {key!r}")
    node[parts[-1]] = value
    return ExperimentSpec.from_dict(d, base_dir=spec.base_dir)
