"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it knows exactly the operations a
decoder-only transformer needs (matmul, elementwise add/mul, constant
scaling, embedding gather, RMS norm, SiLU, softmax, cross-entropy, rotary
embedding, transpose/reshape, slicing and concatenation).  Every op is a
plain function returning a new :class:`Tensor`; when gradient recording is
on and an input requires gradients, the output remembers its parents and a
closure that maps the output gradient to input gradients.

Reductions use numpy's fixed-order kernels.  Run under a single BLAS thread
(see :func:`windtunnel._validation.single_threaded`) for bit-identical
results across machines with different core counts.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "ContractError",
    "Tensor",
    "Graph",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "mul",
    "scale",
    "embedding",
    "rms_norm",
    "silu",
    "softmax",
    "softmax_cross_entropy",
    "rope",
    "transpose",
    "reshape",
    "slice_",
    "concat",
    "sum_",
    "backward",
    "numerical_gradient",
    "gradcheck",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class ContractError(RuntimeError):
    """An op was called outside its documented contract."""


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values. Integer and bool inputs are promoted to float64 unless
        ``dtype`` is given.
    requires_grad : bool, default=False
        Whether :func:`backward` should populate ``grad`` for this tensor.
    name : str, optional
        Label used in diagnostics.
    dtype : numpy dtype, optional
        Storage dtype; float32 for training, float64 for gradient checks.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar; each maps onto one of the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_(self)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Linear algebra and elementwise ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching over leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def fn(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def fn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), fn)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    c = float(c)
    out = a.data * c
    return _make(out, (a,), lambda g: (g * c,))


def sum_(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


# ---------------------------------------------------------------------------
# Network building blocks
# ---------------------------------------------------------------------------


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (vocab x d) at integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    out = table.data[ids]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(out, (table,), fn)


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gamma`` over the last axis."""
    if gamma.ndim != 1 or gamma.shape[0] != x.shape[-1]:
        raise ShapeError(f"rms_norm gain {gamma.shape} does not match last dim of {x.shape}")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True) + x.dtype.type(eps)
    r = 1.0 / np.sqrt(ms)
    xhat = x.data * r
    out = xhat * gamma.data

    def fn(g):
        gg = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        gx = None
        if x.requires_grad:
            gxh = g * gamma.data
            gx = r * (gxh - xhat * np.mean(gxh * xhat, axis=-1, keepdims=True))
        return gx, gg

    return _make(out, (x, gamma), fn)


def silu(x: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    out = x.data * s
    return _make(out, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


_MASKS: dict[tuple[int, int], np.ndarray] = {}


def _causal_mask(q: int, k: int) -> np.ndarray:
    key = (q, k)
    if key not in _MASKS:
        _MASKS[key] = np.triu(np.ones((q, k), dtype=bool), k=1 + (k - q))
    return _MASKS[key]


def softmax(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis.

    With ``causal=True`` the last two axes are read as (query, key) and
    entries with key index after the query index get zero probability.
    """
    z = x.data
    if causal:
        z = np.where(_causal_mask(z.shape[-2], z.shape[-1]), -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=-1, keepdims=True)),))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is (B, V); ``targets`` holds B integer class ids.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, V) logits, got {logits.shape}")
    targets = np.asarray(targets).reshape(-1)
    n, vocab = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} rows of logits")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"target out of range [0, {vocab})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, targets]
    out = np.asarray(nll.mean(), dtype=logits.dtype)

    def fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(out, (logits,), fn)


_ROPE_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _rope_tables(seq: int, dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    key = (seq, dim, base, np.dtype(dtype).str)
    if key not in _ROPE_CACHE:
        half = dim // 2
        inv = 1.0 / base ** (np.arange(half, dtype=np.float64) * 2.0 / dim)
        ang = np.arange(seq, dtype=np.float64)[:, None] * inv[None, :]
        ang = np.concatenate([ang, ang], axis=1)
        _ROPE_CACHE[key] = (np.cos(ang).astype(dtype), np.sin(ang).astype(dtype))
    return _ROPE_CACHE[key]


def _rotate_half(u: np.ndarray) -> np.ndarray:
    h = u.shape[-1] // 2
    return np.concatenate([-u[..., h:], u[..., :h]], axis=-1)


def _rotate_half_t(u: np.ndarray) -> np.ndarray:
    h = u.shape[-1] // 2
    return np.concatenate([u[..., h:], -u[..., :h]], axis=-1)


def rope(x: Tensor, base: float = 10000.0) -> Tensor:
    """Rotary position embedding on (..., S, d_h) with positions 0..S-1."""
    seq, dim = x.shape[-2], x.shape[-1]
    if dim % 2:
        raise ShapeError("rope needs an even head dimension")
    cos, sin = _rope_tables(seq, dim, base, x.dtype)
    out = x.data * cos + _rotate_half(x.data) * sin
    return _make(out, (x,), lambda g: (g * cos + _rotate_half_t(g * sin),))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if not axes else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def slice_(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(out, copy=True), (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of nothing")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tensors, fn)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


class Graph:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def backward(self, retain_graph: bool = False) -> None:
        root = self.root
        if root.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {root.shape}")
        if not root.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
            if not retain_graph:
                node._parents = ()
                node._backward = None


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    Graph(loss).backward(retain_graph=retain_graph)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data`` (mutated in place, then restored)."""
    flat = param.data.reshape(-1)
    out = np.empty(flat.shape, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def gradcheck(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
) -> np.ndarray:
    """Element-wise relative error between backward and central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    exact-zero gradient entries from dividing by zero.  Returns the errors of
    all parameters concatenated.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    errs = []
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        numeric = numerical_gradient(fn, p, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        errs.append((np.abs(analytic - numeric) / denom).reshape(-1))
    return np.concatenate(errs) if errs else np.zeros(0)
