"""Adam with per-tensor learning-rate multipliers, global-norm clipping and
decoupled weight decay."""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from typing import Sequence

import numpy as np

__all__ = ["AdamState", "Adam", "OptimizerFault", "adam_step", "clip_by_global_norm", "global_norm"]


class OptimizerFault(FloatingPointError):
    """Raised when a gradient contains NaN or Inf."""

    def __init__(self, step: int, name: str):
        super().__init__(f"non-finite gradient in {name!r} at optimizer step {step}")
        self.step = step
        self.name = name


@dataclasses.dataclass
class AdamState:
    step: int = 0
    m: "OrderedDict[str, np.ndarray]" = dataclasses.field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = dataclasses.field(default_factory=OrderedDict)
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.1
    clip_norm: float | None = None

    def hyperparams(self) -> dict:
        return {k: getattr(self, k) for k in ("beta1", "beta2", "eps", "weight_decay", "clip_norm")}


def global_norm(grads: Sequence[np.ndarray]) -> float:
    # float64 accumulation in registration order
    total = 0.0
    for g in grads:
        g64 = g.astype(np.float64, copy=False).reshape(-1)
        total += float(g64 @ g64)
    return math.sqrt(total)


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    factor = max_norm / (norm + 1e-12)
    return [g * np.asarray(factor, dtype=g.dtype) for g in grads], norm


class Adam:
    """Bias-corrected Adam over named numpy parameters.

    Each parameter carries its own learning-rate multiplier (the muP width
    rule) and a flag saying whether weight decay applies.  Decay is
    decoupled: ``p <- p * (1 - lr_eff * wd)`` before the Adam update.
    """

    def __init__(self, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.1, clip_norm=None):
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay, clip_norm=clip_norm)
        self.last_grad_norm: float | None = None

    def step(self, params, grads, base_lr: float, multipliers=None, decay_mask=None) -> None:
        """Apply one update in place.

        Parameters
        ----------
        params : dict[str, ndarray]
            Parameters, updated in place.
        grads : dict[str, ndarray]
            Gradients with matching keys and shapes.
        base_lr : float
        multipliers : dict[str, float], optional
            Per-parameter learning-rate multiplier (default 1).
        decay_mask : dict[str, bool], optional
            Which parameters receive weight decay (default all).
        """
        st = self.state
        if base_lr <= 0:
            raise ValueError("base_lr must be positive")
        names = list(params)
        if set(names) != set(grads):
            raise KeyError("params and grads have different keys")
        glist = []
        for n in names:
            g = grads[n]
            if g.shape != params[n].shape:
                raise ValueError(f"{n}: grad shape {g.shape} != param shape {params[n].shape}")
            if not np.all(np.isfinite(g)):
                raise OptimizerFault(st.step + 1, n)
            glist.append(g)
        if st.clip_norm is not None:
            glist, self.last_grad_norm = clip_by_global_norm(glist, st.clip_norm)
        else:
            self.last_grad_norm = global_norm(glist)

        st.step += 1
        t = st.step
        bc1 = 1.0 - st.beta1 ** t
        bc2 = 1.0 - st.beta2 ** t
        for n, g in zip(names, glist):
            p = params[n]
            if n not in st.m:
                st.m[n] = np.zeros_like(p)
                st.v[n] = np.zeros_like(p)
            m, v = st.m[n], st.v[n]
            lr = base_lr * (1.0 if multipliers is None else multipliers.get(n, 1.0))
            if st.weight_decay and (decay_mask is None or decay_mask.get(n, True)):
                p *= 1.0 - lr * st.weight_decay
            m *= st.beta1
            m += (1.0 - st.beta1) * g
            v *= st.beta2
            v += (1.0 - st.beta2) * (g * g)
            denom = np.sqrt(v / bc2)
            denom += st.eps
            p -= (lr / bc1) * m / denom

    def state_dict(self) -> dict:
        st = self.state
        return {
            "step": st.step,
            "m": OrderedDict((k, a.copy()) for k, a in st.m.items()),
            "v": OrderedDict((k, a.copy()) for k, a in st.v.items()),
            **st.hyperparams(),
        }

    def load_state_dict(self, d: dict) -> None:
        self.state = AdamState(
            step=int(d["step"]),
            m=OrderedDict((k, np.array(a, copy=True)) for k, a in d["m"].items()),
            v=OrderedDict((k, np.array(a, copy=True)) for k, a in d["v"].items()),
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            weight_decay=d["weight_decay"],
            clip_norm=d["clip_norm"],
        )


def adam_step(state: AdamState, params, grads, base_lr, multipliers=None, decay_mask=None) -> AdamState:
    """Functional wrapper around :meth:`Adam.step` that mutates ``params`` and ``state``."""
    opt = Adam()
    opt.state = state
    opt.step(params, grads, base_lr, multipliers, decay_mask)
    return opt.state
