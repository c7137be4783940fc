"""Experiment orchestration: configs, corpora, training runs, sweeps and reports."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentSpec, apply_override, dump_spec, load_spec
from .data import MixtureSampler, TokenSource, ingest_corpus, load_ingested, synthetic_corpus
from .quantize import quantize_checkpoint
from .report import REPORT_KINDS, IngestionError, read_metrics, report
from .sweep import expand_grid, sweep
from .train import METRIC_COLUMNS, RunFault, RunRecord, TrainingRun, fork_decay, load_run, resume_run, run_experiment

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "ExperimentSpec",
    "IngestionError",
    "METRIC_COLUMNS",
    "MixtureSampler",
    "REPORT_KINDS",
    "RunFault",
    "RunRecord",
    "TokenSource",
    "TrainingRun",
    "apply_override",
    "dump_spec",
    "expand_grid",
    "fork_decay",
    "ingest_corpus",
    "load_checkpoint",
    "load_ingested",
    "load_run",
    "load_spec",
    "quantize_checkpoint",
    "read_metrics",
    "report",
    "resume_run",
    "run_experiment",
    "save_checkpoint",
    "sweep",
    "synthetic_corpus",
]
