"""Synthetic class-structured corpora, Dirichlet client splits and MIA splits.

Vocabulary layout for ``V`` tokens and ``C`` classes: the top ``V // 4`` ids
form the non-member band; the rest is cut into ``C`` equal class bands.  Each
class emits first-order Markov chains over its own band, and every sequence
carries one uniformly random "secret" span so individual sequences can be
memorised.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import RngStream

MAX_PARTITION_RETRIES = 200


class PartitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class VocabLayout:
    vocab_size: int
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.vocab_size < 4 * self.num_classes:
            raise ValueError(f"vocab_size must be >= 4 * num_classes ({4 * self.num_classes}), got {self.vocab_size}")

    @property
    def band_size(self) -> int:
        return (self.vocab_size - self.vocab_size // 4) // self.num_classes

    def class_band(self, c: int) -> np.ndarray:
        return np.arange(c * self.band_size, (c + 1) * self.band_size)

    def nonmember_band(self) -> np.ndarray:
        return np.arange(self.vocab_size - self.vocab_size // 4, self.vocab_size)


@dataclass(frozen=True, eq=False)
class Corpus:
    tokens: np.ndarray  # n x T, int64
    labels: np.ndarray  # n

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def seq_len(self) -> int:
        return self.tokens.shape[1]


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    indices: np.ndarray  # rows of the training corpus
    tokens: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class MiaSplit:
    members: np.ndarray
    nonmembers: np.ndarray
    member_indices: np.ndarray  # rows of the training corpus


def _markov_template(band: np.ndarray, gen: np.random.Generator, peak: float = 0.3) -> np.ndarray:
    k = len(band)
    return gen.dirichlet(np.full(k, peak), size=k)


def _sample_chains(band, transition, count, seq_len, gen, seen: set) -> np.ndarray:
    k = len(band)
    span = max(2, seq_len // 6)
    cum = np.cumsum(transition, axis=1)
    out = np.empty((count, seq_len), dtype=np.int64)
    row = 0
    while row < count:
        local = np.empty(seq_len, dtype=np.int64)
        local[0] = gen.integers(k)
        u = gen.random(seq_len)
        for t in range(1, seq_len):
            local[t] = min(int(np.searchsorted(cum[local[t - 1]], u[t], side="right")), k - 1)
        start = gen.integers(1, seq_len - span + 1)
        local[start:start + span] = gen.integers(k, size=span)
        seq = band[local]
        key = seq.tobytes()
        if key in seen:
            continue
        seen.add(key)
        out[row] = seq
        row += 1
    return out


def generate_corpus(
    stream: RngStream,
    num_classes: int = 6,
    per_class: int = 200,
    seq_len: int = 24,
    vocab_size: int = 64,
    split: str = "train",
) -> Corpus:
    """Generate ``per_class`` sequences for each class.

    Class templates depend only on ``stream``; ``split`` selects an
    independent set of sequences drawn from the same templates (e.g. a held-out
    evaluation set).  Sequences are unique within one call.
    """
    layout = VocabLayout(vocab_size, num_classes)
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if seq_len < 4:
        raise ValueError("seq_len must be at least 4")
    tokens, labels = [], []
    seen: set = set()
    for c in range(num_classes):
        band = layout.class_band(c)
        trans = _markov_template(band, stream.child("templates", c).generator())
        gen = stream.child(split, c).generator()
        tokens.append(_sample_chains(band, trans, per_class, seq_len, gen, seen))
        labels.append(np.full(per_class, c, dtype=np.int64))
    return Corpus(np.concatenate(tokens), np.concatenate(labels))


def generate_nonmembers(stream: RngStream, count: int, seq_len: int, vocab_size: int, num_classes: int) -> np.ndarray:
    """Sequences over the non-member band, which no class ever emits."""
    band = VocabLayout(vocab_size, num_classes).nonmember_band()
    trans = _markov_template(band, stream.child("template").generator())
    return _sample_chains(band, trans, count, seq_len, stream.child("sequences").generator(), set())


def dirichlet_partition(corpus: Corpus, num_clients: int, concentration: float, stream: RngStream) -> list[ClientDataset]:
    """Split each class across clients with Dirichlet(concentration) proportions.

    Per class, proportions ``p ~ Dir(concentration * 1_K)`` are drawn and the
    class's samples are dealt out with multinomial counts.  A draw leaving any
    client empty is rejected and redrawn from a fresh sub-stream.
    """
    if num_clients < 2:
        raise ValueError("need at least two clients")
    if concentration <= 0:
        raise ValueError("concentration must be positive")
    classes = np.unique(corpus.labels)
    for attempt in range(MAX_PARTITION_RETRIES):
        gen = stream.child("attempt", attempt).generator()
        owner = np.empty(len(corpus), dtype=np.int64)
        for c in classes:
            idx = np.flatnonzero(corpus.labels == c)
            idx = idx[gen.permutation(len(idx))]
            p = gen.dirichlet(np.full(num_clients, concentration))
            counts = gen.multinomial(len(idx), p)
            owner[idx] = np.repeat(np.arange(num_clients), counts)
        sizes = np.bincount(owner, minlength=num_clients)
        if sizes.min() >= 1:
            out = []
            for k in range(num_clients):
                rows = np.flatnonzero(owner == k)
                out.append(ClientDataset(k, rows, corpus.tokens[rows], corpus.labels[rows]))
            return out
    raise PartitionError(
        f"could not give all {num_clients} clients a sample after {MAX_PARTITION_RETRIES} draws; "
        "use a larger corpus or a higher concentration"
    )


def class_histogram(clients: list[ClientDataset], num_classes: int) -> np.ndarray:
    return np.stack([np.bincount(c.labels, minlength=num_classes) for c in clients])


def make_mia_split(
    corpus: Corpus,
    count: int,
    stream: RngStream,
    vocab_size: int,
    num_classes: int,
) -> MiaSplit:
    """``count`` training members and ``count`` freshly generated non-members."""
    if count < 1 or count > len(corpus):
        raise ValueError(f"count must be in [1, {len(corpus)}], got {count}")
    rows = np.sort(stream.child("members").generator().choice(len(corpus), size=count, replace=False))
    nonmembers = generate_nonmembers(stream.child("nonmembers"), count, corpus.seq_len, vocab_size, num_classes)
    return MiaSplit(corpus.tokens[rows], nonmembers, rows)


def export_partition(path, clients: list[ClientDataset]) -> None:
    """Write one ``{client_id, class, tokens}`` JSON record per line."""
    with open(Path(path), "w", encoding="utf-8") as fh:
        for c in clients:
            for toks, lab in zip(c.tokens, c.labels):
                fh.write(json.dumps({"client_id": c.client_id, "class": int(lab), "tokens": toks.tolist()}) + "\n")


def export_corpus(path, corpus: Corpus, client_of: Optional[np.ndarray] = None) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for i, (toks, lab) in enumerate(zip(corpus.tokens, corpus.labels)):
            cid = None if client_of is None else int(client_of[i])
            fh.write(json.dumps({"client_id": cid, "class": int(lab), "tokens": toks.tolist()}) + "\n")
