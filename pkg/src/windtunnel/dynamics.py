"""Training-dynamics probes along the optimisation trajectory.

With ``g_t`` the flattened gradient at step t and ``v_t = x_{t+1} - x_t`` the
parameter update that followed it:

* ``D1 = g_{t+1} . v_t / |v_t|`` (slope along the path),
* ``D2 = (g_{t+1} - g_t) . v_t / |v_t|^2`` (second derivative along the path),
* ``K = |D2| / (1 + D1^2)^{3/2}`` (curvature of the loss graph along the path).
"""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping

import numpy as np

__all__ = [
    "UndefinedDirectionError",
    "StepProbe",
    "grad_stats",
    "max_weight_update",
    "ProbeRecorder",
    "attach_probes",
    "PROBE_COLUMNS",
]

PROBE_COLUMNS = ("grad_norm", "grad_inner", "grad_cosine", "d1", "d2", "curvature", "max_update", "max_abs_update")


class UndefinedDirectionError(ValueError):
    """The parameter update is the zero vector, so directional derivatives do not exist."""


@dataclasses.dataclass
class StepProbe:
    step: int | None
    grad_norm: float
    grad_inner: float
    grad_cosine: float
    d1: float
    d2: float
    curvature: float
    max_update: dict = dataclasses.field(default_factory=dict)
    max_abs_update: dict = dataclasses.field(default_factory=dict)

    def row(self) -> dict:
        """Scalar CSV fields; per-matrix updates are summarised by their maxima."""
        out = {k: getattr(self, k) for k in PROBE_COLUMNS[:6]}
        out["max_update"] = max(self.max_update.values()) if self.max_update else float("nan")
        out["max_abs_update"] = max(self.max_abs_update.values()) if self.max_abs_update else float("nan")
        return out


def _as_vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(-1)


def grad_stats(g_t, g_t1, v_t) -> StepProbe:
    """Gradient norm/inner product/cosine and the path derivatives D1, D2, K.

    ``grad_norm`` is the norm of the later gradient ``g_t1``.  Raises
    :class:`UndefinedDirectionError` when ``v_t`` is zero.
    """
    g_t, g_t1, v_t = _as_vec(g_t), _as_vec(g_t1), _as_vec(v_t)
    if not (g_t.shape == g_t1.shape == v_t.shape):
        raise ValueError(f"length mismatch: {g_t.shape}, {g_t1.shape}, {v_t.shape}")
    vv = float(v_t @ v_t)
    if vv == 0.0:
        raise UndefinedDirectionError("update vector has zero norm")
    n0 = math.sqrt(float(g_t @ g_t))
    n1 = math.sqrt(float(g_t1 @ g_t1))
    inner = float(g_t1 @ g_t)
    cos = inner / (n1 * n0) if n0 > 0 and n1 > 0 else float("nan")
    if cos == cos:
        cos = min(1.0, max(-1.0, cos))
    d1 = float(g_t1 @ v_t) / math.sqrt(vv)
    d2 = float((g_t1 - g_t) @ v_t) / vv
    k = abs(d2) / (1.0 + d1 * d1) ** 1.5
    return StepProbe(step=None, grad_norm=n1, grad_inner=inner, grad_cosine=cos, d1=d1, d2=d2, curvature=k)


def max_weight_update(W_t, W_t1) -> float:
    """Signed ``max_ij (W_t1 - W_t)_ij``."""
    a, b = np.asarray(W_t), np.asarray(W_t1)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.max(b.astype(np.float64) - a.astype(np.float64)))


class ProbeRecorder:
    """Streams :class:`StepProbe` records from consecutive training steps.

    Call :meth:`observe` once per step, after the backward pass and before
    the optimizer update, with the current parameters and raw gradients.
    A probe is emitted at every step ``s >= 2`` with ``s % cadence == 0``,
    pairing step ``s`` with step ``s - 1``; it carries ``step = s``.  The
    recorder copies what it keeps and never writes to its inputs.
    """

    def __init__(self, cadence: int = 1):
        if cadence < 1:
            raise ValueError("cadence must be >= 1")
        self.cadence = int(cadence)
        self.probes: list[StepProbe] = []
        self._prev: tuple[int, dict, np.ndarray] | None = None

    def _flat(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([_as_vec(a) for a in arrays.values()])

    def observe(self, step: int, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> StepProbe | None:
        probe = None
        if self._prev is not None and self._prev[0] == step - 1 and step % self.cadence == 0:
            _, prev_params, prev_grad = self._prev
            g = self._flat(grads)
            v = self._flat(params) - self._flat({k: prev_params[k] for k in params})
            try:
                probe = grad_stats(prev_grad, g, v)
            except UndefinedDirectionError:
                n0, n1 = float(np.linalg.norm(prev_grad)), float(np.linalg.norm(g))
                inner = float(g @ prev_grad)
                cos = inner / (n0 * n1) if n0 > 0 and n1 > 0 else float("nan")
                nan = float("nan")
                probe = StepProbe(None, n1, inner, cos, nan, nan, nan)
            probe.step = step
            for name, w in params.items():
                if np.ndim(w) == 2:
                    diff = np.asarray(w, dtype=np.float64) - np.asarray(prev_params[name], dtype=np.float64)
                    probe.max_update[name] = float(diff.max())
                    probe.max_abs_update[name] = float(np.abs(diff).max())
            self.probes.append(probe)
        if (step + 1) % self.cadence == 0:
            self._prev = (step, {k: np.array(a, copy=True) for k, a in params.items()}, self._flat(grads))
        else:
            self._prev = None
        return probe

    def state_dict(self) -> dict | None:
        if self._prev is None:
            return None
        step, params, grad = self._prev
        return {"step": step, "params": params, "grad": grad}

    def load_state_dict(self, d: dict | None) -> None:
        self._prev = None if d is None else (int(d["step"]), dict(d["params"]), np.asarray(d["grad"]))


def attach_probes(run, cadence: int = 1) -> ProbeRecorder:
    """Attach a recorder to a training run (anything with a ``probe_recorder`` slot)."""
    rec = ProbeRecorder(cadence)
    run.probe_recorder = rec
    return rec
