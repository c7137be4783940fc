"""Learning-rate schedules and batch-size ramps as pure functions of the step."""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

from ._validation import ConfigError

__all__ = [
    "ScheduleSpec",
    "BatchRamp",
    "wsd_lr",
    "cosine_lr",
    "cosine_loop_lr",
    "lr_at",
    "batch_size_at",
]

KINDS = ("wsd", "cosine", "cosine_loop")


@dataclasses.dataclass(frozen=True)
class ScheduleSpec:
    """A learning-rate schedule.

    Attributes
    ----------
    kind : {"wsd", "cosine", "cosine_loop"}
    eta : float
        Peak learning rate.
    W : int
        Warmup end step.
    T : int
        Stable-stage end step for WSD; the cosine period otherwise.
    S : int
        Total steps.
    half_life : float, optional
        Steps for the exponential decay to halve the rate (WSD only).
        Defaults to ``0.1 * T``.
    floor_frac : float
        Cosine floor as a fraction of ``eta``.
    """

    kind: str
    eta: float
    W: int
    T: int
    S: int
    half_life: float | None = None
    floor_frac: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.kind == "wsd":
            if not 0 <= self.W <= self.T <= self.S:
                raise ConfigError(f"need 0 <= W <= T <= S, got W={self.W} T={self.T} S={self.S}")
            if self.half_life is None:
                object.__setattr__(self, "half_life", 0.1 * self.T if self.T > 0 else 1.0)
            if not self.half_life > 0:
                raise ConfigError("half_life must be positive")
        else:
            if self.T <= 0 or self.W < 0 or self.S < 1:
                raise ConfigError("cosine schedules need T > 0, W >= 0, S >= 1")
            if self.W > self.T:
                raise ConfigError("warmup must end before the cosine period")
        if not 0 < self.floor_frac <= 1:
            raise ConfigError("floor_frac must lie in (0, 1]")

    def replace(self, **changes) -> "ScheduleSpec":
        return dataclasses.replace(self, **changes)

    def phase(self, s: int) -> str:
        """``"warmup"``, ``"stable"`` or ``"decay"`` for WSD; cosine steps past ``T`` count as decay."""
        if s < self.W:
            return "warmup"
        return "stable" if s <= self.T else "decay"


def _check_step(spec: ScheduleSpec, s: int) -> None:
    if not 1 <= s <= spec.S:
        raise ValueError(f"step {s} outside [1, {spec.S}]")


def _warmup(spec: ScheduleSpec, s: int) -> float:
    return s / spec.W * spec.eta


def wsd_lr(spec: ScheduleSpec, s: int) -> float:
    """Warmup-Stable-Decay: linear warmup, plateau at ``eta``, then ``eta * 0.5 ** ((s - T) / half_life)``."""
    if spec.kind != "wsd":
        raise ValueError(f"wsd_lr called with a {spec.kind!r} schedule")
    _check_step(spec, s)
    if s < spec.W:
        return _warmup(spec, s)
    if s <= spec.T:
        return spec.eta
    return 0.5 ** ((s - spec.T) / spec.half_life) * spec.eta


def _cosine_body(spec: ScheduleSpec, s: int) -> float:
    f = spec.floor_frac
    return spec.eta * (f + (1.0 - f) * 0.5 * (1.0 + math.cos(math.pi * s / spec.T)))


def cosine_lr(spec: ScheduleSpec, s: int) -> float:
    """Cosine from ``eta`` down to ``floor_frac * eta`` at ``T``, flat afterwards."""
    if spec.kind != "cosine":
        raise ValueError(f"cosine_lr called with a {spec.kind!r} schedule")
    _check_step(spec, s)
    if s < spec.W:
        return _warmup(spec, s)
    if s <= spec.T:
        return _cosine_body(spec, s)
    return spec.floor_frac * spec.eta


def cosine_loop_lr(spec: ScheduleSpec, s: int) -> float:
    """Cosine continued periodically past ``T`` (back to ``eta`` at ``2T``)."""
    if spec.kind != "cosine_loop":
        raise ValueError(f"cosine_loop_lr called with a {spec.kind!r} schedule")
    _check_step(spec, s)
    if s < spec.W:
        return _warmup(spec, s)
    return _cosine_body(spec, s)


_DISPATCH = {"wsd": wsd_lr, "cosine": cosine_lr, "cosine_loop": cosine_loop_lr}


def lr_at(spec: ScheduleSpec, s: int) -> float:
    return _DISPATCH[spec.kind](spec, s)


@dataclasses.dataclass(frozen=True)
class BatchRamp:
    """Piecewise-constant batch size: ``segments`` is ``[(start_step, tokens), ...]``."""

    segments: tuple[tuple[int, int], ...]

    def __init__(self, segments: Sequence[Sequence[int]]):
        segs = tuple((int(a), int(b)) for a, b in segments)
        if not segs:
            raise ConfigError("batch ramp needs at least one segment")
        starts = [a for a, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError(f"segment starts must strictly increase: {starts}")
        if any(size <= 0 for _, size in segs):
            raise ConfigError("batch sizes must be positive")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def constant(cls, tokens: int) -> "BatchRamp":
        return cls([(1, tokens)])


def batch_size_at(ramp: BatchRamp, s: int) -> int:
    """Size of the last segment starting at or before ``s``."""
    if s < 1:
        raise ValueError("steps start at 1")
    size = ramp.segments[0][1]
    for start, tokens in ramp.segments:
        if start <= s:
            size = tokens
        else:
            break
    return size
