"""muP-parameterized decoder-only transformer.

Architecture: token embedding (optionally shared with the output head),
``n_layers`` pre-norm blocks of grouped-query attention with rotary position
embedding and a gated SiLU feed-forward network, a final RMS norm, and a
linear head.  No biases.

Width scaling follows the tensor-program recipe:

* embedding output multiplied by ``scale_emb``;
* each residual branch multiplied by ``scale_depth / sqrt(n_layers)``;
* every 2-D weight initialised with std ``init_std / sqrt(d_m / d_base)``;
* 2-D weights train at ``1 / (d_m / d_base)`` times the base learning rate;
* output logits multiplied by ``1 / (d_m / d_base)``.

``mup=False`` turns off the three width-dependent rules, which gives the
standard-parameterization control used in learning-rate transfer sweeps.
"""

from __future__ import annotations

import dataclasses
import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from ._validation import ConfigError

__all__ = [
    "ModelConfig",
    "TransformerLM",
    "build_model",
    "count_params",
    "total_params",
    "MINICPM_CONFIGS",
    "WIND_TUNNEL_CONFIGS",
]


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    """Architecture plus muP record.

    ``d_base`` defaults to ``d_m`` (no width multiplier).  The defaults for
    ``scale_emb``, ``scale_depth`` and ``init_std`` are the values found by
    the original hyper-parameter search on the 0.009B proxy model.
    """

    d_m: int
    d_ff: int
    d_h: int
    n_q: int
    n_kv: int
    n_layers: int
    vocab: int = 256
    d_base: int | None = None
    scale_emb: float = 12.0
    scale_depth: float = 1.4
    init_std: float = 0.1
    share_embedding: bool = True
    mup: bool = True
    max_seq: int = 2048
    rope_base: float = 10000.0
    norm_eps: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.d_base is None:
            object.__setattr__(self, "d_base", self.d_m)
        dims = dict(d_m=self.d_m, d_ff=self.d_ff, d_h=self.d_h, n_q=self.n_q, n_kv=self.n_kv,
                    n_layers=self.n_layers, vocab=self.vocab, d_base=self.d_base, max_seq=self.max_seq)
        for k, v in dims.items():
            if int(v) != v or v <= 0:
                raise ConfigError(f"{k} must be a positive integer, got {v!r}")
        if self.n_q * self.d_h != self.d_m:
            raise ConfigError(f"n_q * d_h = {self.n_q * self.d_h} != d_m = {self.d_m}")
        if self.n_q % self.n_kv:
            raise ConfigError(f"n_q={self.n_q} is not a multiple of n_kv={self.n_kv}")
        if self.d_base > self.d_m:
            raise ConfigError(f"d_base={self.d_base} exceeds d_m={self.d_m}")
        if self.d_h % 2:
            raise ConfigError("d_h must be even for rotary embedding")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")

    @property
    def width_mult(self) -> float:
        """``d_m / d_base`` when muP is on, else 1."""
        return self.d_m / self.d_base if self.mup else 1.0

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def with_width(self, d_m: int) -> "ModelConfig":
        """Same shape family at another width: head dim fixed, heads and FFN scaled."""
        if d_m % self.d_h:
            raise ConfigError(f"d_m={d_m} is not a multiple of d_h={self.d_h}")
        n_q = d_m // self.d_h
        group = self.n_q // self.n_kv
        n_kv = max(1, n_q // group)
        if n_q % n_kv:
            n_kv = n_q
        d_ff = int(round(self.d_ff * d_m / self.d_m))
        return self.replace(d_m=d_m, n_q=n_q, n_kv=n_kv, d_ff=d_ff)


def count_params(config: ModelConfig) -> int:
    """Non-embedding parameter count: attention, FFN and the three RMS gains."""
    c = config
    per_layer = (
        c.d_m * c.n_q * c.d_h
        + 2 * c.d_m * c.n_kv * c.d_h
        + c.n_q * c.d_h * c.d_m
        + 3 * c.d_m * c.d_ff
        + 2 * c.d_m
    )
    return c.n_layers * per_layer + c.d_m


def total_params(config: ModelConfig) -> int:
    emb = config.vocab * config.d_m
    return count_params(config) + (emb if config.share_embedding else 2 * emb)


MINICPM_CONFIGS = {
    "minicpm-1.2b": ModelConfig(d_m=1536, d_ff=3840, d_h=64, n_q=24, n_kv=8, n_layers=52, vocab=73440),
    "minicpm-2.4b": ModelConfig(d_m=2304, d_ff=5760, d_h=64, n_q=36, n_kv=36, n_layers=40, vocab=122753),
}

# name -> (config, reported non-embedding params in billions)
WIND_TUNNEL_CONFIGS = {
    name: (ModelConfig(d_m=dm, d_ff=dff, d_h=64, n_q=nh, n_kv=nh, n_layers=nl), nb)
    for name, nb, dm, dff, nh, nl in [
        ("9M", 0.009, 320, 800, 5, 8),
        ("30M", 0.036, 512, 1280, 8, 12),
        ("70M", 0.066, 640, 1600, 10, 14),
        ("0.1B", 0.109, 768, 1920, 12, 16),
        ("0.17B", 0.166, 896, 2240, 14, 18),
        ("0.2B", 0.241, 1024, 2560, 16, 20),
        ("0.5B", 0.499, 1344, 3360, 21, 24),
    ]
}


class TransformerLM:
    """Decoder-only language model over :mod:`windtunnel.autodiff` tensors.

    Parameters are registered in a fixed order (embedding, then each layer's
    attention and FFN weights, final norm, optional head); that order defines
    the flattened parameter vector used by the optimizer and the probes.
    Weights are stored as ``(d_in, d_out)`` so a projection is ``x @ W``.
    """

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: "OrderedDict[str, ad.Tensor]" = OrderedDict()
        c = config
        rng = np.random.default_rng(c.seed)
        std = self.init_std_2d
        kv = c.n_kv * c.d_h

        def weight(name, shape):
            self.params[name] = ad.Tensor(
                rng.normal(0.0, std, size=shape).astype(self.dtype), requires_grad=True, name=name
            )

        def gain(name):
            self.params[name] = ad.Tensor(np.ones(c.d_m, dtype=self.dtype), requires_grad=True, name=name)

        weight("embed", (c.vocab, c.d_m))
        for i in range(c.n_layers):
            p = f"layers.{i}."
            gain(p + "attn_norm")
            weight(p + "q_proj", (c.d_m, c.n_q * c.d_h))
            weight(p + "k_proj", (c.d_m, kv))
            weight(p + "v_proj", (c.d_m, kv))
            weight(p + "o_proj", (c.n_q * c.d_h, c.d_m))
            gain(p + "ffn_norm")
            weight(p + "gate_proj", (c.d_m, c.d_ff))
            weight(p + "up_proj", (c.d_m, c.d_ff))
            weight(p + "down_proj", (c.d_ff, c.d_m))
        gain("final_norm")
        if not c.share_embedding:
            weight("lm_head", (c.d_m, c.vocab))

    @property
    def init_std_2d(self) -> float:
        return self.config.init_std / math.sqrt(self.config.width_mult)

    @property
    def logit_multiplier(self) -> float:
        return 1.0 / self.config.width_mult

    @property
    def residual_multiplier(self) -> float:
        return self.config.scale_depth / math.sqrt(self.config.n_layers)

    def parameters(self) -> Iterator[ad.Tensor]:
        return iter(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def is_embedding(self, name: str) -> bool:
        return name in ("embed", "lm_head")

    def is_matrix(self, name: str) -> bool:
        return self.params[name].ndim == 2

    def non_embedding_count(self) -> int:
        return sum(p.data.size for n, p in self.params.items() if not self.is_embedding(n))

    def param_groups(self) -> list[tuple[str, ad.Tensor, float]]:
        """``(name, tensor, lr multiplier)`` for every parameter, in registration order.

        Hidden 2-D weights get ``d_base / d_m``; norm gains and embedding
        tables (including an untied head) keep multiplier 1.
        """
        mult = 1.0 / self.config.width_mult
        return [
            (n, p, mult if (p.ndim == 2 and not self.is_embedding(n)) else 1.0)
            for n, p in self.params.items()
        ]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state_dict(self, state) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state dict keys differ: {sorted(missing)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{n}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def astype(self, dtype) -> "TransformerLM":
        clone = TransformerLM.__new__(TransformerLM)
        clone.config = self.config
        clone.dtype = np.dtype(dtype)
        clone.params = OrderedDict(
            (n, ad.Tensor(p.data.astype(dtype), requires_grad=True, name=n)) for n, p in self.params.items()
        )
        return clone

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _linear(self, x: ad.Tensor, name: str, capture: dict | None) -> ad.Tensor:
        if capture is not None:
            capture.setdefault("inputs", {})[name] = x.data.reshape(-1, x.shape[-1])
        return x @ self.params[name]

    def _attention(self, x: ad.Tensor, p: str, capture: dict | None) -> ad.Tensor:
        c = self.config
        B, S, _ = x.shape
        group = c.n_q // c.n_kv
        q = self._linear(x, p + "q_proj", capture).reshape(B, S, c.n_kv, group, c.d_h)
        k = self._linear(x, p + "k_proj", capture).reshape(B, S, c.n_kv, 1, c.d_h)
        v = self._linear(x, p + "v_proj", capture).reshape(B, S, c.n_kv, 1, c.d_h)
        q = ad.rope(q.transpose(0, 2, 3, 1, 4), c.rope_base)      # B, kv, g, S, d_h
        k = ad.rope(k.transpose(0, 2, 3, 1, 4), c.rope_base)      # B, kv, 1, S, d_h
        v = v.transpose(0, 2, 3, 1, 4)
        scores = ad.scale(q @ k.transpose(0, 1, 2, 4, 3), 1.0 / math.sqrt(c.d_h))
        attn = ad.softmax(scores, causal=True) @ v                # B, kv, g, S, d_h
        out = attn.transpose(0, 3, 1, 2, 4).reshape(B, S, c.n_q * c.d_h)
        return self._linear(out, p + "o_proj", capture)

    def _ffn(self, x: ad.Tensor, p: str, capture: dict | None) -> ad.Tensor:
        gate = ad.silu(self._linear(x, p + "gate_proj", capture))
        up = self._linear(x, p + "up_proj", capture)
        return self._linear(gate * up, p + "down_proj", capture)

    def forward(self, tokens, targets=None, capture: dict | None = None):
        """Run the network on ``tokens`` (B, S).

        Returns ``(logits, loss)`` where logits is a (B, S, vocab) tensor and
        loss is the mean next-token cross-entropy against ``targets`` (B, S),
        or ``None`` when no targets are given.  ``capture``, if a dict, is
        filled with the embedding output (``"embed_out"``), every residual
        branch output (``"branches"``) and every projection input
        (``"inputs"``).
        """
        c = self.config
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ad.ShapeError(f"tokens must be (B, S), got {tokens.shape}")
        if tokens.shape[1] > c.max_seq:
            raise ad.ShapeError(f"sequence length {tokens.shape[1]} exceeds max_seq={c.max_seq}")
        B, S = tokens.shape
        h = ad.scale(ad.embedding(self.params["embed"], tokens), c.scale_emb)
        if capture is not None:
            capture["embed_out"] = h.data
            capture["branches"] = []
        rs = self.residual_multiplier
        for i in range(c.n_layers):
            p = f"layers.{i}."
            a = self._attention(ad.rms_norm(h, self.params[p + "attn_norm"], c.norm_eps), p, capture)
            h = h + ad.scale(a, rs)
            f = self._ffn(ad.rms_norm(h, self.params[p + "ffn_norm"], c.norm_eps), p, capture)
            h = h + ad.scale(f, rs)
            if capture is not None:
                capture["branches"].extend([a.data, f.data])
        h = ad.rms_norm(h, self.params["final_norm"], c.norm_eps)
        if c.share_embedding:
            head = ad.transpose(self.params["embed"], (1, 0))
        else:
            head = self.params["lm_head"]
        if capture is not None:
            capture.setdefault("inputs", {})["lm_head"] = h.data.reshape(-1, c.d_m)
        logits = ad.scale(h @ head, self.logit_multiplier)
        loss = None
        if targets is not None:
            targets = np.asarray(targets)
            if targets.shape != tokens.shape:
                raise ad.ShapeError(f"targets {targets.shape} do not match tokens {tokens.shape}")
            loss = ad.softmax_cross_entropy(logits.reshape(B * S, c.vocab), targets.reshape(-1))
        return logits, loss

    __call__ = forward

    def loss_on_windows(self, windows) -> ad.Tensor:
        """Mean next-token loss on (B, S+1) windows."""
        windows = np.asarray(windows)
        return self.forward(windows[:, :-1], windows[:, 1:])[1]

    def token_losses(self, windows) -> np.ndarray:
        """Per-token negative log-likelihoods (B, S) without recording a graph."""
        windows = np.asarray(windows)
        with ad.no_grad():
            logits, _ = self.forward(windows[:, :-1])
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=-1))
        tgt = windows[:, 1:]
        picked = np.take_along_axis(z, tgt[..., None], axis=-1)[..., 0]
        return lse - picked


def build_model(config: ModelConfig, dtype=np.float32) -> TransformerLM:
    """Initialise a model; identical ``config.seed`` gives bit-identical weights."""
    return TransformerLM(config, dtype=dtype)
