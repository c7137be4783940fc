"""Group-wise int4 weight quantization: round-to-nearest and GPTQ.

For a weight matrix ``W`` (d_out x d_in) every ``G`` consecutive entries of
a row form a group with its own real-valued scale and zero point::

    scale = (max(w) - min(w)) / (2**bits - 1)
    zero  = -min(w) / scale - 2**(bits - 1)
    q     = clamp(round(w / scale + zero), -2**(bits-1), 2**(bits-1) - 1)
    w_hat = scale * (q - zero)

GPTQ quantizes columns left to right and pushes each column's rounding
error onto the not-yet-quantized columns through the inverse of the
calibration Hessian ``H = 2 X X^T + lambda I``.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_finite_array

__all__ = [
    "SCALE_EPS",
    "QuantizedMatrix",
    "CalibrationSet",
    "quantize_group",
    "dequantize_group",
    "quantize_rtn",
    "dequantize",
    "gptq_quantize",
    "quantization_objective",
    "GPTQQuantizer",
    "pack_nibbles",
    "unpack_nibbles",
    "save_quantized",
    "load_quantized",
]

SCALE_EPS = 1e-8


class HessianError(np.linalg.LinAlgError):
    """The damped calibration Hessian is not positive definite."""


@dataclasses.dataclass
class QuantizedMatrix:
    ints: np.ndarray      # (d_out, d_in) int8
    scales: np.ndarray    # (d_out, d_in // G)
    zeros: np.ndarray     # (d_out, d_in // G)
    group_size: int
    bits: int = 4

    def __post_init__(self):
        d_out, d_in = self.ints.shape
        if d_in % self.group_size:
            raise ValueError(f"d_in={d_in} is not a multiple of group size {self.group_size}")
        ng = d_in // self.group_size
        if self.scales.shape != (d_out, ng) or self.zeros.shape != (d_out, ng):
            raise ValueError("scales/zeros must be (d_out, d_in // G)")
        lo, hi = -(2 ** (self.bits - 1)), 2 ** (self.bits - 1) - 1
        if self.ints.size and (self.ints.min() < lo or self.ints.max() > hi):
            raise ValueError(f"quantized values outside [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ints.shape


@dataclasses.dataclass
class CalibrationSet:
    """Calibration activations ``X`` (d_in x n_samples)."""

    X: np.ndarray
    tag: str = ""

    def __post_init__(self):
        self.X = check_finite_array(self.X, "X", ndim=2)
        if self.X.shape[1] < 1:
            raise ValueError("calibration set needs at least one sample")


def _qrange(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def _group_params(w: np.ndarray, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Scale and zero over the last axis of ``w``."""
    mn, mx = w.min(axis=-1), w.max(axis=-1)
    scale = np.maximum((mx - mn) / (2 ** bits - 1), SCALE_EPS)
    zero = -mn / scale - 2 ** (bits - 1)
    return scale, zero


def _quant(w, scale, zero, bits: int) -> np.ndarray:
    lo, hi = _qrange(bits)
    return np.clip(np.rint(w / scale + zero), lo, hi)


def quantize_group(w, bits: int = 4) -> tuple[np.ndarray, float, float]:
    """Quantize one group; returns ``(ints, scale, zero)``."""
    w = check_finite_array(w, "w", ndim=1)
    if w.size < 1:
        raise ValueError("empty group")
    scale, zero = _group_params(w, bits)
    return _quant(w, scale, zero, bits).astype(np.int8), float(scale), float(zero)


def dequantize_group(ints, scale: float, zero: float) -> np.ndarray:
    return scale * (np.asarray(ints, dtype=np.float64) - zero)


def quantize_rtn(W, group_size: int, bits: int = 4) -> QuantizedMatrix:
    """Round-to-nearest group quantization of a (d_out, d_in) matrix."""
    W = check_finite_array(W, "W", ndim=2)
    d_out, d_in = W.shape
    if group_size < 1 or d_in % group_size:
        raise ValueError(f"d_in={d_in} is not a multiple of group size {group_size}")
    g = W.reshape(d_out, d_in // group_size, group_size)
    scale, zero = _group_params(g, bits)
    ints = _quant(g, scale[..., None], zero[..., None], bits).astype(np.int8).reshape(d_out, d_in)
    return QuantizedMatrix(ints, scale, zero, group_size, bits)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    d_out, d_in = q.shape
    g = q.ints.reshape(d_out, d_in // q.group_size, q.group_size).astype(np.float64)
    return (q.scales[..., None].astype(np.float64) * (g - q.zeros[..., None])).reshape(d_out, d_in)


def quantization_objective(W, W_hat, X) -> float:
    """``||W X - W_hat X||_F^2``."""
    diff = (np.asarray(W, dtype=np.float64) - np.asarray(W_hat, dtype=np.float64)) @ np.asarray(X, dtype=np.float64)
    return float(np.sum(diff * diff))


def gptq_quantize(W, X, group_size: int, damping: float = 0.01, bits: int = 4):
    """GPTQ with per-group scales, natural column order.

    Parameters
    ----------
    W : array (d_out, d_in)
    X : array (d_in, n_samples) or :class:`CalibrationSet`
    group_size : int
    damping : float
        ``lambda = damping * mean(diag(2 X X^T))``.

    Returns
    -------
    q : QuantizedMatrix
    report : dict
        ``gptq_objective`` and ``rtn_objective`` (``||WX - W_hat X||_F^2``)
        plus the damping actually applied.
    """
    if isinstance(X, CalibrationSet):
        X = X.X
    W0 = check_finite_array(W, "W", ndim=2)
    X = check_finite_array(X, "X", ndim=2)
    d_out, d_in = W0.shape
    if X.shape[0] != d_in:
        raise ValueError(f"calibration rows {X.shape[0]} != d_in {d_in}")
    if group_size < 1 or d_in % group_size:
        raise ValueError(f"d_in={d_in} is not a multiple of group size {group_size}")
    if damping < 0:
        raise ValueError("damping must be non-negative")

    H = 2.0 * (X @ X.T)
    lam = damping * float(np.mean(np.diag(H)))
    H[np.diag_indices(d_in)] += lam
    try:
        Hinv = cho_solve(cho_factor(H), np.eye(d_in))
    except np.linalg.LinAlgError:
        raise HessianError(
            f"damped Hessian is singular (damping={damping}); try a larger damping such as {max(10 * damping, 0.01)}"
        ) from None

    Wk = W0.copy()
    ng = d_in // group_size
    ints = np.zeros((d_out, d_in), dtype=np.int8)
    scales = np.zeros((d_out, ng))
    zeros = np.zeros((d_out, ng))
    for q in range(d_in):
        gi = q // group_size
        if q % group_size == 0:
            scales[:, gi], zeros[:, gi] = _group_params(Wk[:, q:q + group_size], bits)
        wq = Wk[:, q]
        iq = _quant(wq, scales[:, gi], zeros[:, gi], bits)
        ints[:, q] = iq
        dq = scales[:, gi] * (iq - zeros[:, gi])
        d = Hinv[q, q]
        err = (wq - dq) / d
        if q + 1 < d_in:
            row = Hinv[q, q + 1:]
            Wk[:, q + 1:] -= np.outer(err, row)
            # inverse of H restricted to the remaining columns
            Hinv[q + 1:, q + 1:] -= np.outer(Hinv[q + 1:, q], row) / d

    qm = QuantizedMatrix(ints, scales, zeros, group_size, bits)
    report = {
        "gptq_objective": quantization_objective(W0, dequantize(qm), X),
        "rtn_objective": quantization_objective(W0, dequantize(quantize_rtn(W0, group_size, bits)), X),
        "damping": damping,
        "lambda": lam,
    }
    return qm, report


class GPTQQuantizer(TransformerMixin, BaseEstimator):
    """Quantize one weight matrix; ``transform`` applies the dequantized weights.

    ``fit(W, X)`` takes the (d_out, d_in) weight and optional (d_in, n)
    calibration activations; with ``method="rtn"`` or no ``X`` plain
    round-to-nearest is used.  ``transform(X)`` returns ``W_hat @ X``.
    """

    def __init__(self, group_size: int = 64, damping: float = 0.01, bits: int = 4, method: str = "gptq"):
        self.group_size = group_size
        self.damping = damping
        self.bits = bits
        self.method = method

    def fit(self, W, X=None):
        if self.method not in ("gptq", "rtn"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "gptq" and X is not None:
            self.quantized_, self.report_ = gptq_quantize(W, X, self.group_size, self.damping, self.bits)
        else:
            self.quantized_ = quantize_rtn(W, self.group_size, self.bits)
            W = np.asarray(W, dtype=np.float64)
            self.report_ = {} if X is None else {
                "rtn_objective": quantization_objective(W, dequantize(self.quantized_), X)}
        self.weight_ = dequantize(self.quantized_)
        return self

    def transform(self, X):
        check_is_fitted(self, "weight_")
        return self.weight_ @ check_finite_array(X, "X", ndim=2)


# ---------------------------------------------------------------------------
# On-disk format: manifest.json + packed nibbles + f32 scales/zeros
# ---------------------------------------------------------------------------

FORMAT_NAME = "windtunnel-int4"
FORMAT_VERSION = 1


def pack_nibbles(ints) -> bytes:
    """Two signed 4-bit values per byte, first value in the low nibble."""
    flat = (np.asarray(ints, dtype=np.int16).reshape(-1) & 0xF).astype(np.uint8)
    if flat.size % 2:
        flat = np.append(flat, np.uint8(0))
    return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_nibbles(data: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(b.size * 2, dtype=np.int16)
    out[0::2] = b & 0xF
    out[1::2] = b >> 4
    out = out[:count]
    out[out >= 8] -= 16
    return out.astype(np.int8)


def save_quantized(path: str, mats: dict[str, QuantizedMatrix], extra: dict | None = None) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "tensors": {}, **(extra or {})}
    for name, q in mats.items():
        if q.bits != 4:
            raise ValueError("the packed format stores 4-bit values only")
        stem = name.replace("/", "_")
        with open(os.path.join(path, stem + ".q4"), "wb") as f:
            f.write(pack_nibbles(q.ints))
        q.scales.astype("<f4").tofile(os.path.join(path, stem + ".scales.f32"))
        q.zeros.astype("<f4").tofile(os.path.join(path, stem + ".zeros.f32"))
        manifest["tensors"][name] = {"shape": list(q.shape), "group_size": q.group_size, "bits": q.bits, "stem": stem}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_quantized(path: str) -> dict[str, QuantizedMatrix]:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"{path} is not a {FORMAT_NAME} directory")
    out = {}
    for name, meta in manifest["tensors"].items():
        d_out, d_in = meta["shape"]
        ng = d_in // meta["group_size"]
        stem = os.path.join(path, meta["stem"])
        with open(stem + ".q4", "rb") as f:
            ints = unpack_nibbles(f.read(), d_out * d_in).reshape(d_out, d_in)
        scales = np.fromfile(stem + ".scales.f32", dtype="<f4").reshape(d_out, ng)
        zeros = np.fromfile(stem + ".zeros.f32", dtype="<f4").reshape(d_out, ng)
        out[name] = QuantizedMatrix(ints, scales, zeros, meta["group_size"], meta["bits"])
    return out
