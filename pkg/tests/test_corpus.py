import hashlib
import json
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from offsite.corpus import (
    BatchPlan,
    Corpus,
    CorpusError,
    batch_stream,
    bundled_corpus,
    detokenize,
    load_corpus,
    make_batches,
    resolve_corpus,
    steps_per_epoch,
    tokenize,
)


def test_tokenize_examples():
    assert tokenize(b"").tolist() == []
    assert tokenize(b"AB").tolist() == [65, 66]
    assert tokenize("é").tolist() == [0xC3, 0xA9]


@given(st.binary(max_size=200))
def test_tokenize_round_trip(data):
    assert detokenize(tokenize(data)) == data


def test_ten_tokens_give_two_windows():
    batches = make_batches(np.arange(10), BatchPlan(seq_len=4, batch_size=1))
    assert len(batches) == 2
    starts = sorted(int(x[0, 0]) for x, _ in batches)
    assert starts == [0, 4]


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 300), seq=st.integers(1, 20), bs=st.integers(1, 5), seed=st.integers(0, 10))
def test_batches_shift_and_shape(n, seq, bs, seed):
    tokens = np.arange(n) * 7  # distinct values make every window's position recoverable
    plan = BatchPlan(seq, bs, seed)
    if (n - 1) // seq == 0:
        with pytest.raises(CorpusError):
            make_batches(tokens, plan)
        return
    batches = make_batches(tokens, plan)
    assert len(batches) == ((n - 1) // seq) // bs == steps_per_epoch(tokens, plan)
    starts = []
    for x, y in batches:
        assert x.shape == y.shape == (bs, seq)
        pos = x // 7
        assert np.array_equal(y, tokens[pos + 1])
        assert np.all(pos[:, 0] % seq == 0) and np.all(np.diff(pos, axis=1) == 1)
        starts.extend(pos[:, 0].tolist())
    assert len(set(starts)) == len(starts)  # non-overlapping


def test_batch_order_is_seeded():
    tokens = np.arange(1000) % 256
    a = make_batches(tokens, BatchPlan(8, 4, seed=3))
    b = make_batches(tokens, BatchPlan(8, 4, seed=3))
    c = make_batches(tokens, BatchPlan(8, 4, seed=4))
    assert all(np.array_equal(x1, x2) for (x1, _), (x2, _) in zip(a, b))
    assert not all(np.array_equal(x1, x2) for (x1, _), (x2, _) in zip(a, c))


def test_stream_reshuffles_each_epoch():
    tokens = np.arange(100) % 256
    plan = BatchPlan(9, 11, seed=0)  # exactly one batch per epoch
    s = batch_stream(tokens, plan)
    first, second = next(s)[0], next(s)[0]
    assert sorted(first[:, 0].tolist()) == sorted(second[:, 0].tolist())
    assert not np.array_equal(first, second)


def test_bundled_corpora_match_pinned_hashes():
    manifest = json.loads(resources.files("offsite").joinpath("data", "corpora.json").read_text())
    for name in ("pretrain", "downstream"):
        c = bundled_corpus(name)
        assert c.content_hash == manifest[f"{name}.txt"]["sha256"]
        assert len(c.raw) == manifest[f"{name}.txt"]["bytes"]
    assert bundled_corpus("pretrain").content_hash != bundled_corpus("downstream").content_hash


def test_split_is_a_partition():
    c = Corpus("x", bytes(range(256)) * 4, 0.75)
    assert len(c.train) + len(c.validation) == len(c.raw)
    assert np.array_equal(np.concatenate([c.train, c.validation]), c.tokens)
    assert c.split_hash() == Corpus("y", c.raw, 0.75).split_hash()
    assert c.split_hash() != Corpus("x", c.raw, 0.8).split_hash()


def test_resolve_corpus(tmp_path):
    p = tmp_path / "t.txt"
    p.write_bytes(b"hello world")
    assert resolve_corpus(str(p)).raw == b"hello world"
    assert load_corpus(p).name == "t"
    assert resolve_corpus("bundled:downstream").name == "downstream"
    with pytest.raises(CorpusError):
        resolve_corpus("bundled:nope")
    with pytest.raises(CorpusError):
        Corpus("x", b"abc", 1.0)


def test_bundled_corpus_hash_is_sha256_of_bytes():
    c = bundled_corpus("downstream")
    assert c.content_hash == hashlib.sha256(c.raw).hexdigest()
