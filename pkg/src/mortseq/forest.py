"""CART trees and random forests over sparse integer count features.

Splits are ``count > threshold`` tests with integer thresholds; a feature
absent from a sparse row has count 0. Trees are stored as flat node
arrays (preorder), which is also their serialized layout.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch
from .ngrams import SparseFeatureVector, to_csr

FORMAT_VERSION = 1
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 25
    min_samples_leaf: int = 2
    max_features: Optional[int] = None  # None -> floor(sqrt(V))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_samples_leaf < 1:
            raise ValueError("n_trees, max_depth and min_samples_leaf must be positive")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be positive")

    def features_per_split(self, n_features: int) -> int:
        if self.max_features is None:
            return max(1, int(math.isqrt(max(n_features, 1))))
        if self.max_features > n_features:
            raise ValueError(f"max_features={self.max_features} exceeds V={n_features}")
        return self.max_features


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return x ^ (x >> np.uint64(31))


def key_hashes(keys: Sequence[str]) -> np.ndarray:
    return np.array(
        [int.from_bytes(hashlib.blake2b(k.encode(), digest_size=8).digest(), "little") for k in keys],
        dtype=np.uint64,
    )


class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value, n_features):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.int64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.n_features = n_features

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_classes(self) -> int:
        return self.value.shape[1]

    def depth(self) -> int:
        best, stack = 0, [(0, 0)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.feature[node] >= 0:
                stack.append((self.left[node], d + 1))
                stack.append((self.right[node], d + 1))
        return best

    def apply_dense(self, xd: np.ndarray) -> np.ndarray:
        node = np.zeros(xd.shape[0], dtype=np.int64)
        rows = np.arange(xd.shape[0])
        while True:
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                return node
            go_right = xd[rows, np.where(internal, feat, 0)] > self.threshold[node]
            nxt = np.where(go_right, self.right[node], self.left[node])
            node = np.where(internal, nxt, node)

    def to_obj(self):
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_obj(cls, obj, n_features):
        value = np.array(obj["value"], dtype=np.float64)
        return cls(obj["feature"], obj["threshold"], obj["left"], obj["right"], value, n_features)


class _Builder:
    def __init__(self, X: sp.csr_matrix, y, n_classes, params: ForestParams, rng, key_hash, key_rank):
        self.X = X
        self.y = np.asarray(y, dtype=np.int64)
        self.K = n_classes
        self.p = params
        self.m = params.features_per_split(X.shape[1])
        self.rng = rng
        self.key_hash = key_hash
        self.key_rank = key_rank
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def _new_node(self, counts):
        self.feature.append(-1)
        self.threshold.append(0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(counts / counts.sum())
        return len(self.feature) - 1

    def build(self, rows, depth=0):
        counts = np.bincount(self.y[rows], minlength=self.K).astype(np.float64)
        node = self._new_node(counts)
        n = len(rows)
        if depth >= self.p.max_depth or n < 2 * self.p.min_samples_leaf or (counts > 0).sum() <= 1:
            return node
        split = self._best_split(rows)
        if split is None:
            return node
        feat, thr, go_right = split
        self.feature[node] = feat
        self.threshold[node] = thr
        self.left[node] = self.build(rows[~go_right], depth + 1)
        self.right[node] = self.build(rows[go_right], depth + 1)
        return node

    def _best_split(self, rows):
        sub = self.X[rows]
        n = len(rows)
        cols = sub.indices
        if len(cols) == 0:
            return None
        local_rows = np.repeat(np.arange(n), np.diff(sub.indptr))
        vals = sub.data
        order = np.argsort(cols, kind="stable")
        cols, local_rows, vals = cols[order], local_rows[order], vals[order]
        feats, starts, nnz = np.unique(cols, return_index=True, return_counts=True)
        vmin = np.minimum.reduceat(vals, starts)
        vmax = np.maximum.reduceat(vals, starts)
        varying = ~((nnz == n) & (vmin == vmax))
        cand = feats[varying]
        if len(cand) == 0:
            return None
        if len(cand) > self.m:
            salt = np.uint64(self.rng.integers(0, 2**63, dtype=np.int64))
            pri = _splitmix(self.key_hash[cand] ^ salt)
            cand = cand[np.argsort(pri, kind="stable")[: self.m]]
        cand = cand[np.argsort(self.key_rank[cand], kind="stable")]

        pos = np.full(self.X.shape[1], -1, dtype=np.int64)
        pos[cand] = np.arange(len(cand))
        keep = pos[cols] >= 0
        block = np.zeros((n, len(cand)), dtype=np.int64)
        block[local_rows[keep], pos[cols[keep]]] = vals[keep]

        levels, ranks = np.unique(block, return_inverse=True)
        ranks = ranks.reshape(block.shape)
        R, K, M = len(levels), self.K, len(cand)
        y = self.y[rows]
        flat = (np.arange(M)[None, :] * R + ranks) * K + y[:, None]
        hist = np.bincount(flat.ravel(), minlength=M * R * K).reshape(M, R, K).astype(np.float64)
        left = np.cumsum(hist, axis=1)[:, :-1, :]  # threshold = levels[r]
        if left.shape[1] == 0:
            return None
        total = hist.sum(axis=1, keepdims=True)
        right = total - left
        n_left = left.sum(axis=2)
        n_right = n - n_left
        min_leaf = self.p.min_samples_leaf
        valid = (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            score = (left**2).sum(axis=2) / n_left + (right**2).sum(axis=2) / n_right
        score = np.where(valid, score, -np.inf)
        best = int(np.argmax(score))  # first max: lowest key rank, then lowest threshold
        j, r = divmod(best, score.shape[1])
        thr = int(levels[r])
        return int(cand[j]), thr, block[:, j] > thr

    def tree(self):
        return Tree(self.feature, self.threshold, self.left, self.right, np.array(self.value), self.X.shape[1])


def _as_csr(X) -> sp.csr_matrix:
    if isinstance(X, SparseFeatureVector):
        return to_csr([X])
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], SparseFeatureVector):
        return to_csr(list(X))
    if sp.issparse(X):
        X = X.tocsr()
    else:
        X = sp.csr_matrix(np.atleast_2d(np.asarray(X)))
    X = X.astype(np.int64)
    X.sort_indices()
    return X


def _feature_identity(n_features, feature_keys):
    if feature_keys is None:
        feature_keys = [str(j) for j in range(n_features)]
        rank = np.arange(n_features)
    else:
        if len(feature_keys) != n_features:
            raise DimensionMismatch("one feature key per column required")
        rank = np.empty(n_features, dtype=np.int64)
        rank[np.argsort(np.array(feature_keys, dtype=object), kind="stable")] = np.arange(n_features)
    return key_hashes(feature_keys), rank


def train_tree(X, y, n_classes: int, params: ForestParams = ForestParams(), rng=None,
               feature_keys=None, rows=None) -> Tree:
    """Greedy Gini tree on ``rows`` of ``X`` (all rows by default)."""
    X = _as_csr(X)
    if rng is None:
        rng = np.random.default_rng(params.seed)
    kh, kr = _feature_identity(X.shape[1], feature_keys)
    if rows is None:
        rows = np.arange(X.shape[0])
    builder = _Builder(X, y, n_classes, params, rng, kh, kr)
    builder.build(np.asarray(rows, dtype=np.int64))
    return builder.tree()


class Forest:
    def __init__(self, trees: list, n_classes: int, n_features: int, n_samples: int = 0):
        self.trees = trees
        self.n_classes = n_classes
        self.n_features = n_features
        self.n_samples = n_samples

    def _check(self, X):
        X = _as_csr(X)
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Mean of member-tree leaf distributions, one row per sample."""
        X = self._check(X)
        out = np.zeros((X.shape[0], self.n_classes))
        chunk = max(1, (1 << 22) // max(self.n_features, 1))
        for s in range(0, X.shape[0], chunk):
            xd = X[s:s + chunk].toarray()
            acc = np.zeros((xd.shape[0], self.n_classes))
            for t in self.trees:
                acc += t.value[t.apply_dense(xd)]
            out[s:s + chunk] = acc / len(self.trees)
        return out

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_obj(self):
        return {
            "n_samples": self.n_samples,
            "trees": [t.to_obj() for t in self.trees],
        }

    @classmethod
    def from_obj(cls, obj, n_classes, n_features):
        trees = [Tree.from_obj(t, n_features) for t in obj["trees"]]
        return cls(trees, n_classes, n_features, obj.get("n_samples", 0))


def train_forest(X, y, n_classes: int, params: ForestParams = ForestParams(),
                 shard_index: int = 0, feature_keys=None) -> Forest:
    """Bagged trees with per-node feature subsampling.

    The random stream is seeded by ``(params.seed, shard_index)`` so a
    plain forest equals the forest of shard 0.
    """
    X = _as_csr(X)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        raise ValueError("cannot train on an empty sample")
    if X.shape[0] != len(y):
        raise DimensionMismatch("X and y have different lengths")
    rng = np.random.default_rng([params.seed, shard_index])
    kh, kr = _feature_identity(X.shape[1], feature_keys)
    n = X.shape[0]
    trees = []
    for _ in range(params.n_trees):
        if params.bootstrap:
            rows = np.sort(rng.integers(0, n, size=n))
        else:
            rows = np.arange(n)
        builder = _Builder(X, y, n_classes, params, rng, kh, kr)
        builder.build(rows)
        trees.append(builder.tree())
    return Forest(trees, n_classes, X.shape[1], n)


def predict_proba(forest: Forest, x) -> np.ndarray:
    """Class distribution for a single sparse vector (or rows of a matrix)."""
    p = forest.predict_proba(x)
    return p[0] if isinstance(x, SparseFeatureVector) else p


def params_to_obj(p: ForestParams):
    return asdict(p)


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
