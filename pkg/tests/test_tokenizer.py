from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from windtunnel.tokenizer import (
    BPETokenizer,
    TokenizerModel,
    compression_rate,
    decode,
    encode,
    load_tokenizer,
    save_tokenizer,
    train_bpe,
)


def naive_bpe(docs, max_vocab, min_frequency):
    """Reference trainer over Python lists."""
    seqs = [list(d) for d in docs]
    table = [bytes([i]) for i in range(256)]
    merges = []
    while len(table) < max_vocab:
        counts = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            break
        best = max(counts.values())
        if best < min_frequency:
            break
        a, b = min((p for p, c in counts.items() if c == best), key=lambda p: (table[p[0]], table[p[1]]))
        new = len(table)
        table.append(table[a] + table[b])
        merges.append((a, b))
        out = []
        for s in seqs:
            r, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and s[i] == a and s[i + 1] == b:
                    r.append(new)
                    i += 2
                else:
                    r.append(s[i])
                    i += 1
            out.append(r)
        seqs = out
    return merges


def test_aaaa_trace():
    m = train_bpe(b"aaaa", 258, min_frequency=1)
    assert m.merges == ((97, 97), (256, 256))
    assert encode(m, b"aaaa").tolist() == [257]
    assert encode(m, b"aaaaa").tolist() == [257, 97]
    assert compression_rate(m, b"aaaa") == 4.0


def test_default_min_frequency_stops_on_singletons():
    m = train_bpe(b"aaaa", 258)
    assert m.merges == ((97, 97),)


def test_unique_bytes_no_merges():
    assert train_bpe(bytes(range(256)), 300).merges == ()


def test_documents_not_bridged():
    m = train_bpe([b"ab", b"ab", b"ba"], 300, min_frequency=1)
    assert m.merges[0] == (97, 98)
    assert (98, 98) not in m.merges and (98, 97) in m.merges


def test_tie_break_by_bytes():
    m = train_bpe(b"zy ab", 257, min_frequency=1)
    assert m.merges == ((32, 97),)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.binary(min_size=0, max_size=40).map(lambda b: bytes(x % 4 + 97 for x in b)), min_size=1, max_size=4),
       st.integers(256, 280), st.integers(1, 3))
def test_matches_reference_trainer(docs, vocab, minf):
    assert list(train_bpe(docs, vocab, minf).merges) == naive_bpe(docs, vocab, minf)


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=200), st.binary(min_size=1, max_size=200))
def test_roundtrip_and_rate(train, data):
    m = train_bpe(train + train, 300)
    assert decode(m, encode(m, data)) == data
    assert compression_rate(m, data) >= 1.0


def test_validation():
    with pytest.raises(ValueError):
        train_bpe(b"x", 100)
    with pytest.raises(ValueError):
        train_bpe(b"x", 300, min_frequency=0)
    with pytest.raises(TypeError):
        train_bpe("text", 300)
    with pytest.raises(ValueError):
        TokenizerModel([(300, 1)])
    with pytest.raises(KeyError):
        decode(TokenizerModel(), [256])
    with pytest.raises(ValueError):
        compression_rate(TokenizerModel(), b"")


def test_save_load(tmp_path):
    rng = np.random.default_rng(0)
    data = bytes(rng.integers(97, 101, size=3000, dtype=np.uint8))
    m = train_bpe(data, 320)
    p = tmp_path / "tok.bpe"
    save_tokenizer(m, str(p))
    assert p.read_text().startswith("#windtunnel-bpe v1\n")
    assert load_tokenizer(str(p)) == m
    p.write_text("bad\n")
    with pytest.raises(ValueError):
        load_tokenizer(str(p))
    with pytest.raises(FileNotFoundError):
        load_tokenizer(str(tmp_path / "missing"))


def test_estimator():
    docs = [b"the cat sat on the mat", b"the hat"]
    tok = BPETokenizer(max_vocab=270).fit(docs)
    ids = tok.transform(docs)
    assert tok.inverse_transform(ids) == docs
    assert tok.score(docs) > 1.0
