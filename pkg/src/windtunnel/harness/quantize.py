"""Post-training int4 quantization of a checkpoint's projection weights."""

from __future__ import annotations

import json
import os

import numpy as np

from .._validation import ConfigError, single_threaded
from ..quant import dequantize, gptq_quantize, quantization_objective, quantize_rtn, save_quantized
from .checkpoint import load_checkpoint
from .config import ExperimentSpec
from .train import TrainingRun

__all__ = ["quantize_checkpoint"]


def quantize_checkpoint(checkpoint: str, out_dir: str, group_size: int = 32, damping: float = 0.01,
                        method: str = "gptq", calib_windows: int = 16) -> dict:
    """Quantize every hidden 2-D weight of a checkpoint and write the packed format.

    Calibration activations are the inputs each projection sees on the
    first ``calib_windows`` training windows of the stable-stage sources.
    Embeddings and norm gains stay in f32 (written under ``fp32/``).
    Returns a report with per-matrix objectives and eval loss before and
    after quantization.
    """
    if method not in ("gptq", "rtn"):
        raise ConfigError(f"unknown method {method!r}")
    ckpt = load_checkpoint(checkpoint)
    spec = ExperimentSpec.from_dict(ckpt.state["spec"], base_dir=ckpt.state.get("base_dir", "."))
    run = TrainingRun(spec, out_dir)
    run.model.load_state_dict(ckpt.group("model"))
    model = run.model
    names = list(spec.mixture("stable"))
    calib = np.concatenate([run.sources[n].windows[:calib_windows] for n in names])
    capture: dict = {}
    with single_threaded():
        model.forward(calib[:, :-1], capture=capture)
        base_loss, base_bpb = run.evaluate()
        mats, per_matrix = {}, {}
        for n, p in model.named_parameters():
            if p.ndim != 2 or model.is_embedding(n):
                continue
            W = p.data.astype(np.float64).T          # (d_out, d_in)
            if W.shape[1] % group_size:
                raise ConfigError(f"{n}: d_in={W.shape[1]} is not a multiple of group size {group_size}")
            X = capture["inputs"][n].astype(np.float64).T
            if method == "gptq":
                q, rep = gptq_quantize(W, X, group_size, damping)
            else:
                q = quantize_rtn(W, group_size)
                rep = {"rtn_objective": quantization_objective(W, dequantize(q), X)}
            mats[n] = q
            per_matrix[n] = rep
        for n, q in mats.items():
            model.params[n].data = dequantize(q).T.astype(model.dtype)
        q_loss, q_bpb = run.evaluate()
    os.makedirs(out_dir, exist_ok=True)
    save_quantized(out_dir, mats, extra={"checkpoint": os.path.abspath(checkpoint), "checkpoint_digest": ckpt.digest,
                                         "method": method, "damping": damping})
    fp_dir = os.path.join(out_dir, "fp32")
    os.makedirs(fp_dir, exist_ok=True)
    for n, p in model.named_parameters():
        if n not in mats:
            np.ascontiguousarray(p.data).astype("<f4").tofile(os.path.join(fp_dir, n + ".f32"))
    report = {
        "schema_version": 1,
        "method": method,
        "group_size": group_size,
        "damping": damping,
        "eval_loss": {"fp32": base_loss, "quantized": q_loss},
        "eval_loss_per_byte": {"fp32": base_bpb, "quantized": q_bpb},
        "matrices": per_matrix,
    }
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report
