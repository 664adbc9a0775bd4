"""Byte-level corpora, train/validation splits and deterministic window batching."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

VOCAB_SIZE = 256
BUNDLED = ("pretrain", "downstream")


class CorpusError(ValueError):
    pass


def tokenize(data: bytes | str) -> np.ndarray:
    """Bytes map to ids 0..255 one to one; ``str`` is UTF-8 encoded first."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    return np.asarray(ids, dtype=np.uint8).tobytes()


@dataclass(frozen=True)
class Corpus:
    name: str
    raw: bytes
    train_fraction: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise CorpusError("train_fraction must lie strictly between 0 and 1")

    @property
    def tokens(self) -> np.ndarray:
        return tokenize(self.raw)

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.raw).hexdigest()

    @property
    def boundary(self) -> int:
        return int(len(self.raw) * self.train_fraction)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[: self.boundary]

    @property
    def validation(self) -> np.ndarray:
        return self.tokens[self.boundary:]

    def split_hash(self) -> str:
        h = hashlib.sha256(f"{self.content_hash}:{self.train_fraction!r}:{self.boundary}".encode())
        return h.hexdigest()


def load_corpus(path: str | Path, train_fraction: float = 0.9, name: str | None = None) -> Corpus:
    p = Path(path)
    return Corpus(name or p.stem, p.read_bytes(), train_fraction)


def _bundled_manifest() -> dict:
    return json.loads(resources.files("offsite").joinpath("data", "corpora.json").read_text())


def bundled_corpus(name: str, train_fraction: float = 0.9) -> Corpus:
    """One of the shipped public-domain corpora, checked against its pinned hash."""
    if name not in BUNDLED:
        raise CorpusError(f"unknown bundled corpus {name!r}; choose from {BUNDLED}")
    raw = resources.files("offsite").joinpath("data", f"{name}.txt").read_bytes()
    expected = _bundled_manifest()[f"{name}.txt"]["sha256"]
    if hashlib.sha256(raw).hexdigest() != expected:
        raise CorpusError(f"bundled corpus {name!r} does not match its pinned sha256")
    return Corpus(name, raw, train_fraction)


def resolve_corpus(spec: str, train_fraction: float = 0.9) -> Corpus:
    """``bundled:<name>`` or a filesystem path."""
    if spec.startswith("bundled:"):
        return bundled_corpus(spec.split(":", 1)[1], train_fraction)
    return load_corpus(spec, train_fraction)


@dataclass(frozen=True)
class BatchPlan:
    seq_len: int = 64
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.seq_len < 1 or self.batch_size < 1:
            raise CorpusError("seq_len and batch_size must be positive")


def n_windows(n_tokens: int, seq_len: int) -> int:
    return max(0, (n_tokens - 1) // seq_len)


def window_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(tokens, plan: BatchPlan, epoch: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Non-overlapping (input, target) windows with targets shifted by one, shuffled per epoch.

    Windows that do not fill a whole batch are dropped, as is the token tail.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    L = plan.seq_len
    nw = n_windows(len(tokens), L)
    if nw == 0:
        raise CorpusError(f"corpus of {len(tokens)} tokens is too small for seq_len {L}")
    order = window_order(nw, plan.seed, epoch)
    starts = order * L
    idx = starts[:, None] + np.arange(L)[None, :]
    inputs = tokens[idx]
    targets = tokens[idx + 1]
    nb = nw // plan.batch_size
    return [
        (inputs[b * plan.batch_size:(b + 1) * plan.batch_size], targets[b * plan.batch_size:(b + 1) * plan.batch_size])
        for b in range(nb)
    ]


def batch_stream(tokens, plan: BatchPlan) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Endless batches, reshuffled each epoch."""
    epoch = 0
    while True:
        batches = make_batches(tokens, plan, epoch)
        if not batches:
            raise CorpusError("corpus yields no full batch")
        yield from batches
        epoch += 1


def steps_per_epoch(tokens, plan: BatchPlan) -> int:
    return n_windows(len(tokens), plan.seq_len) // plan.batch_size
