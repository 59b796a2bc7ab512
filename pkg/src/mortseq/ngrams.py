"""Uni-gram and bi-gram features over Part I cause chains."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import UnsupportedOrder
from .icd import IcdCode, format_code

SUPPORTED_ORDERS = (1, 2)


def tokens_of(chain) -> tuple[str, ...]:
    return tuple(format_code(c) if isinstance(c, IcdCode) else str(c) for c in chain)


def extract_ngrams(chain, order: int) -> list[tuple[str, ...]]:
    """Every run of ``order`` consecutive tokens, in chain order."""
    if order not in SUPPORTED_ORDERS:
        raise UnsupportedOrder(f"only uni-grams and bi-grams are supported, got order {order}")
    toks = tokens_of(chain)
    return [toks[i:i + order] for i in range(len(toks) - order + 1)]


def count_ngrams(chains: Iterable, orders: Sequence[int]) -> Counter:
    """Corpus counts keyed by gram tuple; partial counts merge with ``+``."""
    counts: Counter = Counter()
    for chain in chains:
        for n in orders:
            counts.update(extract_ngrams(chain, n))
    return counts


@dataclass
class SparseFeatureVector:
    indices: np.ndarray
    counts: np.ndarray
    dim: int

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    def __len__(self):
        return len(self.indices)

    def __eq__(self, other):
        return (
            isinstance(other, SparseFeatureVector)
            and self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.counts, other.counts)
        )

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.indices.tolist(), self.counts.tolist()))

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=np.int64)
        out[self.indices] = self.counts
        return out


class NGramVocab:
    """Ranked gram list, one block per order (order 1 first)."""

    def __init__(self, orders, grams, counts, cap_per_order=None):
        self.orders = tuple(sorted(orders))
        self.grams = [tuple(g) for g in grams]
        self.counts = [int(c) for c in counts]
        self.cap_per_order = cap_per_order
        self.index = {g: i for i, g in enumerate(self.grams)}
        if len(self.index) != len(self.grams):
            raise ValueError("duplicate gram in vocabulary")

    def __len__(self):
        return len(self.grams)

    @property
    def dim(self) -> int:
        return len(self.grams)

    def __eq__(self, other):
        return (
            isinstance(other, NGramVocab)
            and self.orders == other.orders
            and self.grams == other.grams
            and self.counts == other.counts
        )

    def keys(self) -> list[str]:
        """Stable string identity for every column."""
        return [" ".join(g) for g in self.grams]

    def dumps(self) -> str:
        head = f"# orders={','.join(map(str, self.orders))} cap={self.cap_per_order}\n"
        body = "".join(
            f"{len(g)}\t{' '.join(g)}\t{i}\t{c}\n"
            for i, (g, c) in enumerate(zip(self.grams, self.counts))
        )
        return head + body

    @classmethod
    def parse(cls, text: str) -> "NGramVocab":
        orders, cap = None, None
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                for part in line[1:].split():
                    k, _, v = part.partition("=")
                    if k == "orders":
                        orders = tuple(int(x) for x in v.split(",") if x)
                    elif k == "cap":
                        cap = None if v == "None" else int(v)
                continue
            if not line.strip():
                continue
            order, toks, idx, count = line.split("\t")
            gram = tuple(toks.split(" "))
            if len(gram) != int(order):
                raise ValueError(f"gram {toks!r} does not have order {order}")
            rows.append((int(idx), gram, int(count)))
        rows.sort()
        if [r[0] for r in rows] != list(range(len(rows))):
            raise ValueError("vocab indices must be dense 0..V-1")
        if orders is None:
            orders = tuple(sorted({len(g) for _, g, _ in rows}))
        return cls(orders, [g for _, g, _ in rows], [c for _, _, c in rows], cap)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "NGramVocab":
        return cls.parse(Path(path).read_text())


def rank_grams(counts: Counter, order: int, cap: int) -> list[tuple[tuple, int]]:
    items = [(g, c) for g, c in counts.items() if len(g) == order]
    items.sort(key=lambda gc: (-gc[1], gc[0]))
    return items[:cap]


def build_vocab(chains: Iterable, orders: Sequence[int] = (1,), cap_per_order: int = 5000) -> NGramVocab:
    """Top ``cap_per_order`` grams per order by corpus frequency.

    Ties at equal frequency go to the lexicographically smaller gram.
    """
    if cap_per_order < 1:
        raise ValueError("cap_per_order must be >= 1")
    orders = tuple(sorted(set(orders)))
    for n in orders:
        if n not in SUPPORTED_ORDERS:
            raise UnsupportedOrder(f"only uni-grams and bi-grams are supported, got order {n}")
    counts = count_ngrams(chains, orders)
    grams, freqs = [], []
    for n in orders:
        for g, c in rank_grams(counts, n, cap_per_order):
            grams.append(g)
            freqs.append(c)
    return NGramVocab(orders, grams, freqs, cap_per_order)


def vectorize(chain, vocab: NGramVocab) -> SparseFeatureVector:
    hits: Counter = Counter()
    for n in vocab.orders:
        for g in extract_ngrams(chain, n):
            j = vocab.index.get(g)
            if j is not None:
                hits[j] += 1
    idx = sorted(hits)
    return SparseFeatureVector(idx, [hits[j] for j in idx], vocab.dim)


def to_csr(vectors: Sequence[SparseFeatureVector], dim: int = None) -> sp.csr_matrix:
    """Stack sparse vectors into an integer CSR matrix."""
    if dim is None:
        dim = vectors[0].dim if vectors else 0
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        indptr[i + 1] = indptr[i] + len(v)
    indices = np.concatenate([v.indices for v in vectors]) if vectors else np.zeros(0, np.int64)
    data = np.concatenate([v.counts for v in vectors]) if vectors else np.zeros(0, np.int64)
    return sp.csr_matrix((data, indices, indptr), shape=(len(vectors), dim))


def vectorize_many(chains: Iterable, vocab: NGramVocab) -> sp.csr_matrix:
    return to_csr([vectorize(c, vocab) for c in chains], vocab.dim)
