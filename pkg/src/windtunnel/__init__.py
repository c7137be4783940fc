"""Desk-scale model wind tunnel.

Tiny muP transformers on a numpy autodiff engine, Warmup-Stable-Decay
schedules with decay fork-off, training-dynamics probes, scaling-law and
batch-size-law fits, int4/GPTQ quantization and byte-level BPE.
"""

from .model import ModelConfig, TransformerLM, build_model, count_params
from .optim import Adam, AdamState, adam_step
from .quant import GPTQQuantizer, dequantize, gptq_quantize, quantize_group, quantize_rtn
from .scalinglaw import (
    EnvelopeRegressor,
    ScalingFit,
    ScalingLawRegressor,
    compute_optimal,
    fit_envelope,
    fit_nd_scaling,
    fit_optimal_batchsize,
)
from .schedule import BatchRamp, ScheduleSpec, batch_size_at, cosine_loop_lr, cosine_lr, lr_at, wsd_lr
from .tokenizer import BPETokenizer, compression_rate, decode, encode, train_bpe

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "AdamState",
    "BPETokenizer",
    "BatchRamp",
    "EnvelopeRegressor",
    "GPTQQuantizer",
    "ModelConfig",
    "ScalingFit",
    "ScalingLawRegressor",
    "ScheduleSpec",
    "TransformerLM",
    "adam_step",
    "batch_size_at",
    "build_model",
    "compression_rate",
    "compute_optimal",
    "cosine_loop_lr",
    "cosine_lr",
    "count_params",
    "decode",
    "dequantize",
    "encode",
    "fit_envelope",
    "fit_nd_scaling",
    "fit_optimal_batchsize",
    "gptq_quantize",
    "lr_at",
    "quantize_group",
    "quantize_rtn",
    "train_bpe",
    "wsd_lr",
]
