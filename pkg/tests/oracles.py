"""Independent reference implementations used as test oracles.

Nothing here imports the feature or model code under test.
"""
import math
from collections import Counter, defaultdict


def chain_tokens(record, drop_terminal=True):
    """Part I as strings, oldest cause first."""
    toks = [f"{c.letter}{c.major:02d}" + ("" if c.etiology is None else f".{c.etiology}") for c in record.part1]
    if drop_terminal:
        toks = toks[:-1]
    return toks[::-1]


class CountBayes:
    """Add-one smoothed unigram or first-order Markov tabulation classifier."""

    def __init__(self, order):
        assert order in (1, 2)
        self.order = order

    def fit(self, seqs, labels):
        self.classes = sorted(set(labels))
        self.vocab = {t for s in seqs for t in s}
        self.uni = defaultdict(Counter)
        self.first = defaultdict(Counter)
        self.pair = defaultdict(Counter)
        for s, y in zip(seqs, labels):
            self.uni[y].update(s)
            if s:
                self.first[y][s[0]] += 1
            for a, b in zip(s, s[1:]):
                self.pair[y][(a, b)] += 1
        self.rows = {y: Counter() for y in self.classes}
        for y in self.classes:
            for (a, _), n in self.pair[y].items():
                self.rows[y][a] += n
        return self

    def score(self, s, y):
        V = len(self.vocab)
        if self.order == 1:
            n = sum(self.uni[y].values())
            return sum(math.log((self.uni[y][t] + 1) / (n + V)) for t in s)
        nf = sum(self.first[y].values())
        out = math.log((self.first[y][s[0]] + 1) / (nf + V)) if s else 0.0
        for a, b in zip(s, s[1:]):
            out += math.log((self.pair[y][(a, b)] + 1) / (self.rows[y][a] + V))
        return out

    def predict(self, s):
        return max(self.classes, key=lambda y: (self.score(s, y), -y))

    def accuracy(self, seqs, labels):
        hits = sum(self.predict(s) == y for s, y in zip(seqs, labels))
        return hits / len(labels)


def brute_vocab(chains, orders, cap):
    """Count every n-gram, rank by (-count, tokens), keep ``cap`` per order."""
    entries = []
    for order in sorted(orders):
        counts = {}
        for toks in chains:
            for i in range(len(toks) - order + 1):
                g = tuple(toks[i:i + order])
                counts[g] = counts.get(g, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
        entries.extend((order, g, n) for g, n in ranked)
    return entries


def brute_vector(toks, entries):
    index = {g: i for i, (_, g, _) in enumerate(entries)}
    out = {}
    for order in sorted({o for o, _, _ in entries}):
        for i in range(len(toks) - order + 1):
            g = tuple(toks[i:i + order])
            if g in index:
                out[index[g]] = out.get(index[g], 0) + 1
    return sorted(out.items())
