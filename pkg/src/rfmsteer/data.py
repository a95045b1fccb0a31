"""Synthetic labeled token sequences.

Three concept kinds:

* ``dominance``: ``n_classes`` disjoint token buckets; a class-``c`` sequence
  draws at least a ``purity`` fraction of its tokens from bucket ``c``.
* ``motif``: binary; positives contain a fixed bigram at least ``min_count``
  times, negatives never contain it.
* ``period``: regression; the sequence repeats a random block whose length is
  the target, and each position is resampled with probability ``1 - purity``.

Export format (tab separated, one header row, one record per line):
``index  concept  kind  label  target  tokens`` with ``tokens`` a
space-separated list of integer ids.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

CONCEPT_KINDS = ("dominance", "motif", "period")
TSV_COLUMNS = ("index", "concept", "kind", "label", "target", "tokens")


@dataclass(frozen=True)
class ConceptSpec:
    name: str
    kind: str
    n_classes: int = 8
    seq_len: int = 64
    purity: float = 0.8
    vocab_size: int = 32
    motif: tuple = (3, 17)
    min_count: int = 3
    periods: tuple = (2, 3, 4, 5, 6, 7, 8, 9)

    def __post_init__(self):
        if self.kind not in CONCEPT_KINDS:
            raise ValueError(f"unknown concept kind {self.kind!r}")
        if self.seq_len < 8:
            raise ValueError("seq_len must be >= 8")
        if not (0.0 < self.purity <= 1.0):
            raise ValueError("purity must be in (0, 1]")
        if self.kind == "dominance":
            if self.n_classes < 2:
                raise ValueError("dominance needs at least 2 classes")
            if self.vocab_size < self.n_classes:
                raise ValueError(f"vocabulary of {self.vocab_size} too small for {self.n_classes} classes")
        if self.kind == "motif":
            a, b = self.motif
            if not (0 <= a < self.vocab_size and 0 <= b < self.vocab_size):
                raise ValueError("motif tokens outside the vocabulary")
            if self.min_count < 1 or 2 * self.min_count > self.seq_len:
                raise ValueError("min_count does not fit in the sequence")
        if self.kind == "period":
            if len(self.periods) < 2:
                raise ValueError("period concept needs at least 2 period values")
            if min(self.periods) < 1 or max(self.periods) > min(self.vocab_size, self.seq_len):
                raise ValueError("period values must fit both vocabulary and sequence")

    @property
    def task(self) -> str:
        return {"dominance": "multiclass", "motif": "binary", "period": "regression"}[self.kind]

    @property
    def class_count(self) -> int:
        return {"dominance": self.n_classes, "motif": 2, "period": len(self.periods)}[self.kind]

    def bucket(self, c: int) -> np.ndarray:
        size = self.vocab_size // self.n_classes
        return np.arange(c * size, (c + 1) * size)


@dataclass
class Dataset:
    spec: ConceptSpec
    tokens: np.ndarray  # (N, T) int
    labels: np.ndarray  # (N,) class index (period: index into spec.periods)
    targets: np.ndarray = field(default=None)  # (N,) float regression target

    def __len__(self):
        return len(self.labels)

    @property
    def y(self) -> np.ndarray:
        """Training labels for the concept's task."""
        return self.targets if self.spec.kind == "period" else self.labels


def _dominance(spec, c, rng):
    T = spec.seq_len
    n_in = math.ceil(spec.purity * T)
    seq = rng.integers(0, spec.vocab_size, size=T)
    seq[:n_in] = rng.choice(spec.bucket(c), size=n_in)
    return rng.permutation(seq)


def _motif(spec, positive, rng):
    a, b = spec.motif
    T, V = spec.seq_len, spec.vocab_size
    if positive:
        seq = rng.integers(0, V, size=T)
        slots = rng.choice(T // 2, size=spec.min_count, replace=False)
        seq[2 * slots] = a
        seq[2 * slots + 1] = b
        return seq
    seq = np.empty(T, dtype=np.int64)
    seq[0] = rng.integers(0, V)
    others = np.delete(np.arange(V), b)
    for t in range(1, T):
        seq[t] = rng.choice(others) if seq[t - 1] == a else rng.integers(0, V)
    return seq


def _period(spec, period, rng):
    T, V = spec.seq_len, spec.vocab_size
    block = rng.choice(V, size=period, replace=False)
    seq = np.resize(block, T)
    noisy = rng.random(T) >= spec.purity
    seq[noisy] = rng.integers(0, V, size=int(noisy.sum()))
    return seq


def synth_dataset(spec: ConceptSpec, n_per_class: int, seed: int) -> Dataset:
    """Exactly ``n_per_class`` sequences per class, in class order."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    rows, labels = [], []
    for c in range(spec.class_count):
        for _ in range(n_per_class):
            if spec.kind == "dominance":
                rows.append(_dominance(spec, c, rng))
            elif spec.kind == "motif":
                rows.append(_motif(spec, c == 1, rng))
            else:
                rows.append(_period(spec, spec.periods[c], rng))
            labels.append(c)
    labels = np.asarray(labels, dtype=np.int64)
    targets = labels.astype(np.float64)
    if spec.kind == "period":
        targets = np.asarray(spec.periods, dtype=np.float64)[labels]
    return Dataset(spec, np.asarray(rows, dtype=np.int64), labels, targets)


def count_bigram(seq, a, b) -> int:
    seq = np.asarray(seq)
    return int(np.sum((seq[:-1] == a) & (seq[1:] == b)))


def write_dataset(path, ds: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(TSV_COLUMNS)
        for i, (seq, lab, tgt) in enumerate(zip(ds.tokens, ds.labels, ds.targets)):
            w.writerow([i, ds.spec.name, ds.spec.kind, int(lab), repr(float(tgt)), " ".join(map(str, seq))])


def read_dataset(path, spec: ConceptSpec) -> Dataset:
    tokens, labels, targets = [], [], []
    with open(path, newline="") as fh:
        r = csv.reader(fh, delimiter="\t")
        header = next(r)
        if tuple(header) != TSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in r:
            labels.append(int(row[3]))
            targets.append(float(row[4]))
            tokens.append([int(t) for t in row[5].split()])
    return Dataset(spec, np.asarray(tokens, dtype=np.int64), np.asarray(labels), np.asarray(targets))
