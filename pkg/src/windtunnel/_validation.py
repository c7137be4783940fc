"""Input validation helpers shared by the estimators and the harness."""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterable

import numpy as np
from threadpoolctl import threadpool_limits


class ConfigError(ValueError):
    """A configuration record violates one of its invariants."""


class UnderdeterminedError(ValueError):
    """Not enough (or not diverse enough) data to determine a fit."""


def check_positive(name: str, value, strict: bool = True) -> None:
    bad = value <= 0 if strict else value < 0
    if np.any(bad):
        raise ValueError(f"{name} must be {'positive' if strict else 'non-negative'}, got {value!r}")


def check_finite_array(X, name: str = "X", ndim: int | None = None, dtype=np.float64) -> np.ndarray:
    """Return ``X`` as a float array, rejecting NaN/Inf and wrong rank."""
    arr = np.asarray(X, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_length(**arrays) -> int:
    lengths = {k: len(v) for k, v in arrays.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"length mismatch: {lengths}")
    return next(iter(lengths.values()), 0)


def digest_bytes(chunks: Iterable[bytes]) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c)
    return h.hexdigest()


def digest_arrays(arrays: Iterable[np.ndarray]) -> str:
    return digest_bytes(np.ascontiguousarray(a).tobytes() for a in arrays)


@contextlib.contextmanager
def single_threaded():
    """Pin BLAS/OpenMP pools to one thread so reductions run in a fixed order."""
    with threadpool_limits(limits=1):
        yield
