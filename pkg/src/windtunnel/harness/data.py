"""Corpora: synthetic Markov text, on-disk ingestion, and the mixture sampler."""

from __future__ import annotations

import dataclasses
import functools
import json
import os
from typing import Mapping, Sequence

import numpy as np

from .._validation import digest_bytes
from ..tokenizer import TokenizerModel, encode, load_tokenizer

__all__ = [
    "synthetic_corpus",
    "IngestedCorpus",
    "ingest_corpus",
    "load_ingested",
    "TokenSource",
    "MixtureSampler",
    "source_from_spec",
]

ALPHABET = b"abcdefghijklmnopqrstuvwxyz .,\n"


def synthetic_corpus(seed: int = 0, n_bytes: int = 100_000, order: int = 2, concentration: float = 0.1,
                     alphabet: bytes = ALPHABET) -> bytes:
    """Seeded order-``order`` Markov character text.

    Each context gets a Dirichlet(``concentration``) next-character
    distribution, so low concentration gives peaky, learnable statistics.
    """
    if n_bytes < 0 or order < 1:
        raise ValueError("n_bytes must be >= 0 and order >= 1")
    rng = np.random.default_rng(seed)
    A = len(alphabet)
    probs = rng.dirichlet(np.full(A, concentration), size=A ** order)
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(n_bytes)
    ctx = int(rng.integers(A ** order))
    out = np.empty(n_bytes, dtype=np.uint8)
    alpha = np.frombuffer(alphabet, dtype=np.uint8)
    base = A ** (order - 1)
    for i in range(n_bytes):
        c = int(np.searchsorted(cdf[ctx], u[i], side="right"))
        out[i] = alpha[c]
        ctx = (ctx % base) * A + c
    return out.tobytes()


@dataclasses.dataclass
class IngestedCorpus:
    tokens: np.ndarray        # int32
    byte_lengths: np.ndarray  # int32, bytes per token
    digest: str               # sha256 of the raw input bytes
    tokenizer_digest: str | None = None

    @property
    def n_bytes(self) -> int:
        return int(self.byte_lengths.sum())


def _read_inputs(path: str) -> list[bytes]:
    if os.path.isdir(path):
        files = sorted(os.path.join(r, f) for r, _, fs in os.walk(path) for f in fs)
    elif os.path.isfile(path):
        files = [path]
    else:
        raise FileNotFoundError(f"cannot read {path!r}")
    out = []
    for fp in files:
        with open(fp, "rb") as f:
            out.append(f.read())
    return out


def tokenize_bytes(data: bytes, tokenizer: TokenizerModel | None) -> tuple[np.ndarray, np.ndarray]:
    if tokenizer is None:
        toks = np.frombuffer(data, dtype=np.uint8).astype(np.int32)
        return toks, np.ones(toks.size, dtype=np.int32)
    toks = encode(tokenizer, data).astype(np.int32)
    return toks, tokenizer.token_lengths()[toks].astype(np.int32)


def ingest_corpus(path: str, tokenizer: TokenizerModel | str | None = None, out_dir: str | None = None) -> IngestedCorpus:
    """Tokenize a file (or every file under a directory, sorted) and optionally store it.

    The output directory holds ``tokens.i32``, ``byte_lengths.i32`` (raw
    little-endian) and ``manifest.json`` with the input digest.
    """
    if isinstance(tokenizer, str):
        tokenizer = load_tokenizer(tokenizer)
    blobs = _read_inputs(path)
    toks, lens = [], []
    for b in blobs:
        t, l = tokenize_bytes(b, tokenizer)
        toks.append(t)
        lens.append(l)
    corpus = IngestedCorpus(
        tokens=np.concatenate(toks) if toks else np.zeros(0, np.int32),
        byte_lengths=np.concatenate(lens) if lens else np.zeros(0, np.int32),
        digest=digest_bytes(blobs),
        tokenizer_digest=None if tokenizer is None else digest_bytes(
            f"{a},{b};".encode() for a, b in tokenizer.merges),
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        corpus.tokens.astype("<i4").tofile(os.path.join(out_dir, "tokens.i32"))
        corpus.byte_lengths.astype("<i4").tofile(os.path.join(out_dir, "byte_lengths.i32"))
        manifest = {
            "format": "windtunnel-corpus",
            "version": 1,
            "source": os.path.abspath(path),
            "digest": corpus.digest,
            "tokenizer_digest": corpus.tokenizer_digest,
            "n_tokens": int(corpus.tokens.size),
            "n_bytes": corpus.n_bytes,
        }
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
    return corpus


def load_ingested(path: str) -> IngestedCorpus:
    with open(os.path.join(path, "manifest.json")) as f:
        m = json.load(f)
    if m.get("format") != "windtunnel-corpus":
        raise ValueError(f"{path} is not an ingested corpus directory")
    return IngestedCorpus(
        tokens=np.fromfile(os.path.join(path, "tokens.i32"), dtype="<i4").astype(np.int32),
        byte_lengths=np.fromfile(os.path.join(path, "byte_lengths.i32"), dtype="<i4").astype(np.int32),
        digest=m["digest"],
        tokenizer_digest=m.get("tokenizer_digest"),
    )


class TokenSource:
    """Token stream cut into fixed windows, split into a training part and a held-out tail."""

    def __init__(self, name: str, tokens: np.ndarray, byte_lengths: np.ndarray, seq_len: int, holdout: float = 0.05):
        self.name = name
        self.seq_len = seq_len
        w = seq_len + 1
        n_windows = (tokens.size - 1) // seq_len
        if n_windows < 2:
            raise ValueError(f"source {name!r} has {tokens.size} tokens; need at least {2 * seq_len + 1}")
        n_eval = max(1, int(round(n_windows * holdout)))
        n_train = n_windows - n_eval
        if n_train < 1:
            raise ValueError(f"source {name!r} is too small to hold out {holdout:.0%}")
        starts = np.arange(n_windows) * seq_len
        idx = starts[:, None] + np.arange(w)[None, :]
        self.windows = tokens[idx].astype(np.int64)
        self.window_bytes = byte_lengths[idx].astype(np.int64)
        self.n_train = n_train
        self.n_eval = n_eval

    def train_window(self, i: int) -> np.ndarray:
        return self.windows[i]

    def eval_windows(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        k = min(k, self.n_eval)
        sl = slice(self.n_train, self.n_train + k)
        return self.windows[sl], self.window_bytes[sl]


@functools.lru_cache(maxsize=8)
def _cached_synthetic(items: tuple) -> bytes:
    return synthetic_corpus(**dict(items))


def source_from_spec(spec, name: str, tokenizer: TokenizerModel | None) -> TokenSource:
    src = spec.sources[name]
    if src.synthetic is not None:
        data = _cached_synthetic(tuple(sorted(dict(src.synthetic).items())))
        toks, lens = tokenize_bytes(data, tokenizer)
    else:
        path = spec.resolve(src.path)
        if os.path.isdir(path) and os.path.exists(os.path.join(path, "manifest.json")):
            c = load_ingested(path)
        else:
            c = ingest_corpus(path, tokenizer)
        toks, lens = c.tokens, c.byte_lengths
    return TokenSource(name, toks, lens, spec.seq_len, spec.eval.holdout)


class MixtureSampler:
    """Seeded draws of training windows from weighted sources.

    Each draw picks a source by the stage weights, then the next window in
    that source's current epoch permutation.  Exhausting a source starts a
    new epoch with a fresh permutation seeded by ``(seed, source, epoch)``.
    """

    def __init__(self, sources: Mapping[str, TokenSource], seed: int):
        self.sources = dict(sources)
        self.names = list(self.sources)
        self.seed = int(seed)
        self.rng = np.random.default_rng([self.seed, 0xB00])
        self.cursor = {n: 0 for n in self.names}
        self.epoch = {n: 0 for n in self.names}
        self.counts: dict[str, dict[str, int]] = {}
        self._perm: dict[str, np.ndarray] = {}

    def _permutation(self, name: str) -> np.ndarray:
        key = (name, self.epoch[name])
        cached = self._perm.get(name)
        if cached is None or cached[0] != key:
            i = self.names.index(name)
            perm = np.random.default_rng([self.seed, i, self.epoch[name]]).permutation(self.sources[name].n_train)
            self._perm[name] = (key, perm)
        return self._perm[name][1]

    def _next(self, name: str) -> np.ndarray:
        perm = self._permutation(name)
        if self.cursor[name] >= perm.size:
            self.epoch[name] += 1
            self.cursor[name] = 0
            perm = self._permutation(name)
        w = self.sources[name].train_window(int(perm[self.cursor[name]]))
        self.cursor[name] += 1
        return w

    def sample(self, n: int, mixture: Mapping[str, float], stage: str = "stable") -> tuple[np.ndarray, list[str]]:
        names = [k for k in self.names if mixture.get(k, 0.0) > 0]
        p = np.array([mixture[k] for k in names], dtype=np.float64)
        p = p / p.sum()
        picks = self.rng.choice(len(names), size=n, p=p)
        chosen = [names[i] for i in picks]
        batch = np.stack([self._next(c) for c in chosen])
        tally = self.counts.setdefault(stage, {})
        for c in chosen:
            tally[c] = tally.get(c, 0) + 1
        return batch, chosen

    def state_dict(self) -> dict:
        return {
            "rng": self.rng.bit_generator.state,
            "cursor": dict(self.cursor),
            "epoch": dict(self.epoch),
            "counts": {k: dict(v) for k, v in self.counts.items()},
        }

    def load_state_dict(self, d: dict) -> None:
        self.rng.bit_generator.state = d["rng"]
        self.cursor = {k: int(v) for k, v in d["cursor"].items()}
        self.epoch = {k: int(v) for k, v in d["epoch"].items()}
        self.counts = {k: {n: int(c) for n, c in v.items()} for k, v in d["counts"].items()}
        self._perm.clear()


def eval_set(sources: Mapping[str, TokenSource], names: Sequence[str], windows: int) -> tuple[np.ndarray, np.ndarray]:
    """Held-out windows from each named source, concatenated in the given order."""
    ws, bs = [], []
    for n in names:
        w, b = sources[n].eval_windows(windows)
        ws.append(w)
        bs.append(b)
    return np.concatenate(ws), np.concatenate(bs)
