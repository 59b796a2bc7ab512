"""In-process map-reduce harness for shard-wise forest training.

The map stage hash-partitions training records by id into disjoint
shards; each reduce task featurizes and fits one forest on its shard
alone; prediction averages the per-shard class scores.
"""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyShard, ModelFormatError
from .forest import Forest, ForestParams, train_forest

FORMAT = "mortseq-forest"
FORMAT_VERSION = 1


def shard_of(record_id: str, n_shards: int, seed: int) -> int:
    h = hashlib.blake2b(f"{seed}:{record_id}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % n_shards


def map_shard(records: Sequence, n_shards: int, seed: int = 0) -> list[list]:
    """Disjoint partition by seeded hash of ``record.id``; input order kept."""
    if n_shards < 1:
        raise ValueError("n_shards must be >= 1")
    shards = [[] for _ in range(n_shards)]
    for r in records:
        shards[shard_of(r.id, n_shards, seed) if n_shards > 1 else 0].append(r)
    return shards


def worker_count(n_tasks: int) -> int:
    cap = os.environ.get("MORTSEQ_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, min(n, n_tasks))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


@dataclass
class ShardedEnsemble:
    forests: list
    n_shards: int
    seed: int
    params: ForestParams
    n_classes: int
    n_features: int
    log: list = field(default_factory=list)

    def shard_scores(self, X) -> np.ndarray:
        """``(S, N, K)`` per-shard class scores."""
        return np.stack([f.predict_proba(X) for f in self.forests])

    def to_obj(self):
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "params": asdict(self.params),
            "n_shards": self.n_shards,
            "shard_seed": self.seed,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "shards": [dict(index=i, **f.to_obj()) for i, f in enumerate(self.forests)],
        }

    @classmethod
    def from_obj(cls, obj) -> "ShardedEnsemble":
        if obj.get("format") != FORMAT:
            raise ModelFormatError(f"not a forest model (format={obj.get('format')!r})")
        if obj.get("version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported forest model version {obj.get('version')!r}")
        K, V = obj["n_classes"], obj["n_features"]
        forests = [Forest.from_obj(s, K, V) for s in sorted(obj["shards"], key=lambda s: s["index"])]
        return cls(forests, obj["n_shards"], obj["shard_seed"], ForestParams(**obj["params"]), K, V)


def _train_shard(i, shard, params, n_classes, featurize, feature_keys):
    X, y = featurize(shard)
    return train_forest(X, y, n_classes, params, shard_index=i, feature_keys=feature_keys)


def reduce_train(
    shards: Sequence[Sequence],
    params: ForestParams,
    n_classes: int,
    featurize: Callable,
    feature_keys=None,
    shard_seed: int = 0,
    workers: Optional[int] = None,
) -> ShardedEnsemble:
    """Fit one forest per shard; shard ``i`` is seeded by ``(params.seed, i)``.

    ``featurize(records) -> (X, y)`` runs inside each reduce task, which
    only ever sees its own shard.
    """
    for i, s in enumerate(shards):
        if len(s) == 0:
            raise EmptyShard(f"shard {i} is empty")
    log = [
        {"stage": "map", "shard": i, "records": len(s), "ids": _digest([r.id for r in s])}
        for i, s in enumerate(shards)
    ]
    workers = workers or worker_count(len(shards))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_train_shard, i, s, params, n_classes, featurize, feature_keys)
                for i, s in enumerate(shards)
            ]
            forests = [f.result() for f in futures]
    else:
        forests = [
            _train_shard(i, s, params, n_classes, featurize, feature_keys) for i, s in enumerate(shards)
        ]
    n_features = forests[0].n_features
    for i, f in enumerate(forests):
        log.append({"stage": "reduce", "shard": i, "trees": len(f.trees), "model": _digest(f.to_obj())})
    return ShardedEnsemble(forests, len(shards), shard_seed, params, n_classes, n_features, log)


def aggregate_vote(ensemble: ShardedEnsemble, X, vote: str = "soft"):
    """``(predicted class, score vector)`` per sample.

    Soft voting averages the shard forests' class probabilities; hard
    voting counts each shard's argmax. Ties go to the lower class index.
    """
    scores = ensemble.shard_scores(X)
    if scores.shape[2] != ensemble.n_classes:
        raise DimensionMismatch("shard forests disagree on the class count")
    if vote == "soft":
        agg = scores.mean(axis=0)
    elif vote == "hard":
        winners = np.argmax(scores, axis=2)
        agg = np.zeros(scores.shape[1:])
        for w in winners:
            agg[np.arange(len(w)), w] += 1.0
        agg /= len(winners)
    else:
        raise ValueError("vote must be 'soft' or 'hard'")
    return np.argmax(agg, axis=1), agg
