"""Byte-level BPE: training, encoding, decoding and the Bytes/Tokens rate.

Training repeatedly merges the most frequent adjacent token pair.  Ties go
to the lexicographically smallest pair, comparing the byte strings of the
left and then the right token.  There is no pre-tokenization, so merges may
cross whitespace; separate documents are never bridged.
"""

from __future__ import annotations

import os
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

__all__ = [
    "TokenizerModel",
    "BPETokenizer",
    "train_bpe",
    "encode",
    "decode",
    "compression_rate",
    "save_tokenizer",
    "load_tokenizer",
]

_SEP = -1
_HEADER = "#windtunnel-bpe v1"


class TokenizerModel:
    """Immutable merge list over the 256 byte tokens."""

    __slots__ = ("merges", "_bytes")

    def __init__(self, merges: Sequence[tuple[int, int]] = ()):
        table = [bytes([i]) for i in range(256)]
        checked = []
        for k, (a, b) in enumerate(merges):
            a, b = int(a), int(b)
            if not (0 <= a < len(table) and 0 <= b < len(table)):
                raise ValueError(f"merge {k} ({a}, {b}) references an undefined token")
            checked.append((a, b))
            table.append(table[a] + table[b])
        self.merges: tuple[tuple[int, int], ...] = tuple(checked)
        self._bytes: tuple[bytes, ...] = tuple(table)

    @property
    def vocab_size(self) -> int:
        return len(self._bytes)

    def token_bytes(self, i: int) -> bytes:
        return self._bytes[i]

    def token_lengths(self) -> np.ndarray:
        return np.array([len(b) for b in self._bytes], dtype=np.int64)

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenizerModel) and self.merges == other.merges

    def __hash__(self) -> int:
        return hash(self.merges)

    def __repr__(self) -> str:
        return f"TokenizerModel(vocab_size={self.vocab_size})"


def _as_docs(corpus) -> list[bytes]:
    if isinstance(corpus, (bytes, bytearray, memoryview)):
        return [bytes(corpus)]
    if isinstance(corpus, str):
        raise TypeError("corpus must be bytes; encode text first")
    docs = [bytes(d) for d in corpus]
    return docs


def _merge(seq: np.ndarray, a: int, b: int, new: int) -> np.ndarray:
    """Replace non-overlapping (a, b) pairs, scanning left to right."""
    if seq.size < 2:
        return seq
    hit = np.flatnonzero((seq[:-1] == a) & (seq[1:] == b))
    if hit.size == 0:
        return seq
    if a == b:
        # inside a run of a's only every other match starts a pair
        run_start = np.ones(hit.size, dtype=bool)
        run_start[1:] = np.diff(hit) != 1
        starts = np.maximum.accumulate(np.where(run_start, hit, 0))
        hit = hit[(hit - starts) % 2 == 0]
    out = seq.copy()
    out[hit] = new
    keep = np.ones(seq.size, dtype=bool)
    keep[hit + 1] = False
    return out[keep]


def _pair_counts(seq: np.ndarray, base: int) -> tuple[np.ndarray, np.ndarray]:
    left, right = seq[:-1], seq[1:]
    ok = (left >= 0) & (right >= 0)
    codes = left[ok].astype(np.int64) * base + right[ok]
    if codes.size == 0:
        return codes, codes
    if base * base <= 1 << 24:
        counts = np.bincount(codes, minlength=0)
        nz = np.flatnonzero(counts)
        return nz, counts[nz]
    return np.unique(codes, return_counts=True)


def train_bpe(corpus, max_vocab: int, min_frequency: int = 2) -> TokenizerModel:
    """Greedy BPE training.

    Parameters
    ----------
    corpus : bytes or iterable of bytes
        Documents; pairs never span two documents.
    max_vocab : int
        Final vocabulary size including the 256 byte tokens.
    min_frequency : int
        Stop when the best pair occurs fewer times than this.
    """
    if max_vocab < 256:
        raise ValueError("max_vocab must be at least 256")
    if min_frequency < 1:
        raise ValueError("min_frequency must be >= 1")
    docs = _as_docs(corpus)
    parts = []
    for d in docs:
        parts.append(np.frombuffer(d, dtype=np.uint8).astype(np.int32))
        parts.append(np.array([_SEP], dtype=np.int32))
    seq = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int32)
    table = [bytes([i]) for i in range(256)]
    merges: list[tuple[int, int]] = []
    while len(table) < max_vocab and seq.size >= 2:
        codes, counts = _pair_counts(seq, max_vocab)
        if counts.size == 0:
            break
        best = counts.max()
        if best < min_frequency:
            break
        tied = codes[counts == best]
        a, b = min(((int(c // max_vocab), int(c % max_vocab)) for c in tied),
                   key=lambda p: (table[p[0]], table[p[1]]))
        new = len(table)
        merges.append((a, b))
        table.append(table[a] + table[b])
        seq = _merge(seq, a, b, new)
    return TokenizerModel(merges)


def encode(model: TokenizerModel, data: bytes) -> np.ndarray:
    """Token ids of ``data``; merges are applied in training order."""
    seq = np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int32)
    for k, (a, b) in enumerate(model.merges):
        if seq.size < 2:
            break
        seq = _merge(seq, a, b, 256 + k)
    return seq


def decode(model: TokenizerModel, ids: Iterable[int]) -> bytes:
    table = model._bytes
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(table):
            raise KeyError(f"unknown token id {i}")
        out.append(table[i])
    return b"".join(out)


def compression_rate(model: TokenizerModel, corpus) -> float:
    """Total bytes over total tokens (Bytes/Tokens)."""
    docs = _as_docs(corpus)
    n_bytes = sum(len(d) for d in docs)
    if n_bytes == 0:
        raise ValueError("empty corpus")
    n_tokens = sum(len(encode(model, d)) for d in docs)
    return n_bytes / n_tokens


def save_tokenizer(model: TokenizerModel, path: str) -> None:
    """One merge per line: ``<left hex> <right hex> <left id> <right id>``.

    The ids disambiguate tokens that happen to share a byte string.
    """
    lines = [_HEADER]
    for a, b in model.merges:
        lines.append(f"{model.token_bytes(a).hex()} {model.token_bytes(b).hex()} {a} {b}")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_tokenizer(path: str) -> TokenizerModel:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines or lines[0].strip() != _HEADER:
        raise ValueError(f"{path}: missing header {_HEADER!r}")
    merges = []
    table = [bytes([i]) for i in range(256)]
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise ValueError(f"{path}:{n}: expected 4 fields")
        lh, rh, a, b = bytes.fromhex(fields[0]), bytes.fromhex(fields[1]), int(fields[2]), int(fields[3])
        if a >= len(table) or b >= len(table) or table[a] != lh or table[b] != rh:
            raise ValueError(f"{path}:{n}: merge does not match earlier tokens")
        merges.append((a, b))
        table.append(lh + rh)
    return TokenizerModel(merges)


class BPETokenizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains, ``transform`` encodes, ``inverse_transform`` decodes.

    ``X`` is a sequence of byte strings (documents).
    """

    def __init__(self, max_vocab: int = 512, min_frequency: int = 2):
        self.max_vocab = max_vocab
        self.min_frequency = min_frequency

    def fit(self, X, y=None):
        self.model_ = train_bpe(_as_docs(X), self.max_vocab, self.min_frequency)
        return self

    def _check(self):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("BPETokenizer is not fitted")

    def transform(self, X):
        self._check()
        return [encode(self.model_, d) for d in _as_docs(X)]

    def inverse_transform(self, X):
        self._check()
        return [decode(self.model_, ids) for ids in X]

    def score(self, X, y=None) -> float:
        """Compression rate on ``X``."""
        self._check()
        return compression_rate(self.model_, _as_docs(X))
