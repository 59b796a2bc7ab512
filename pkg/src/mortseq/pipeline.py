"""End-to-end orchestration shared by the CLI and the acceptance suite."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import lstm
from .dataset import (ClassMap, DeathRecord, FilterReport, SplitSpec, filter_and_label,
                      load_records, model_chain, split)
from .errors import ModelFormatError
from .forest import ForestParams
from .icd import RecodeTable, encode_chain, is_infectious
from .mapreduce import ShardedEnsemble, aggregate_vote, map_shard, reduce_train
from .metrics import MetricsReport, fingerprint
from .ngrams import NGramVocab, build_vocab, vectorize_many

log = logging.getLogger(__name__)

RF_FORMAT = "mortseq-rf"
RF_VERSION = 1


@dataclass
class RunConfig:
    model: str = "rf"
    orders: tuple = (1,)
    vocab_cap: int = 5000
    shards: int = 1
    trees: int = 100
    max_depth: int = 25
    min_samples_leaf: int = 2
    max_features: Optional[int] = None
    bootstrap: bool = True
    vote: str = "soft"
    hidden: int = 30
    dropout: float = 0.1
    lr: float = 0.003
    epochs: int = 40
    batch_size: int = 64
    float32: bool = False
    certificate_order: bool = False  # feed immediate cause first instead of oldest first
    drop_terminal_cause: bool = False
    min_class_count: int = 1000
    train_fraction: float = 0.7
    test_fraction: float = 0.2
    holdout_fraction: float = 0.1
    split_seed: Optional[int] = None
    seed: int = 0
    table: Optional[str] = None
    viz_sample: Optional[int] = None
    perplexity: float = 30.0
    tsne_iterations: int = 1000

    def __post_init__(self):
        if self.model not in ("rf", "lstm"):
            raise ValueError(f"model must be rf or lstm, got {self.model!r}")
        self.orders = tuple(sorted(set(int(o) for o in self.orders)))
        if self.vote not in ("soft", "hard"):
            raise ValueError("vote must be soft or hard")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["orders"] = list(self.orders)
        return d

    def split_spec(self) -> SplitSpec:
        seed = self.seed if self.split_seed is None else self.split_seed
        return SplitSpec(self.train_fraction, self.test_fraction, self.holdout_fraction, seed)

    def forest_params(self) -> ForestParams:
        return ForestParams(self.trees, self.max_depth, self.min_samples_leaf, self.max_features,
                            self.bootstrap, self.seed)

    def network_config(self, n_classes: int) -> lstm.NetworkConfig:
        return lstm.NetworkConfig(
            n_classes=n_classes, hidden=self.hidden, dropout=self.dropout, lr=self.lr,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            dtype="float32" if self.float32 else "float64",
        )

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


@dataclass
class Prepared:
    train: list
    test: list
    holdout: list
    class_map: ClassMap
    report: FilterReport
    too_short: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.class_map)


def load_table(cfg: RunConfig) -> RecodeTable:
    return RecodeTable.load(cfg.table) if cfg.table else RecodeTable.demo()


def prepare(records, cfg: RunConfig, table: Optional[RecodeTable] = None,
            report: Optional[FilterReport] = None) -> Prepared:
    """Filter, label and split; records that would feed an empty chain are dropped first."""
    table = table or load_table(cfg)
    kept, report = filter_and_label(records, table, cfg.min_class_count, report)
    too_short = 0
    if cfg.drop_terminal_cause:
        usable = [r for r in kept if len(r.part1) >= 2]
        too_short = len(kept) - len(usable)
        kept = usable
    train, test, holdout = split(kept, cfg.split_spec())
    return Prepared(train, test, holdout, report.class_map, report, too_short)


def prepare_path(path, cfg: RunConfig, table=None) -> Prepared:
    report = FilterReport()
    return prepare(load_records(path, report), cfg, table, report)


def chains(records, cfg: RunConfig):
    return [model_chain(r, cfg.drop_terminal_cause) for r in records]


def labels(records) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


# --- random forest -----------------------------------------------------------

@dataclass
class RfModel:
    vocab: NGramVocab
    ensemble: ShardedEnsemble
    class_map: ClassMap
    config: RunConfig

    def featurize(self, records):
        return vectorize_many(chains(records, self.config), self.vocab)

    def predict(self, records):
        pred, scores = aggregate_vote(self.ensemble, self.featurize(records), self.config.vote)
        return pred, scores

    def to_obj(self):
        return {
            "format": RF_FORMAT,
            "version": RF_VERSION,
            "config": self.config.to_dict(),
            "class_map": self.class_map.to_obj(),
            "vocab": self.vocab.dumps(),
            "ensemble": self.ensemble.to_obj(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_obj(), sort_keys=True, separators=(",", ":"))

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def from_obj(cls, obj) -> "RfModel":
        if obj.get("format") != RF_FORMAT or obj.get("version") != RF_VERSION:
            raise ModelFormatError(f"not a random-forest model file (format={obj.get('format')!r})")
        return cls(
            NGramVocab.parse(obj["vocab"]),
            ShardedEnsemble.from_obj(obj["ensemble"]),
            ClassMap.from_obj(obj["class_map"]),
            RunConfig.from_dict({**obj["config"], "orders": tuple(obj["config"]["orders"])}),
        )


def train_rf(data: Prepared, cfg: RunConfig) -> RfModel:
    vocab = build_vocab(chains(data.train, cfg), cfg.orders, cfg.vocab_cap)
    shards = map_shard(data.train, cfg.shards, cfg.seed)

    def featurize(records):
        return vectorize_many(chains(records, cfg), vocab), labels(records)

    ensemble = reduce_train(shards, cfg.forest_params(), data.n_classes, featurize,
                            feature_keys=vocab.keys(), shard_seed=cfg.seed)
    for event in ensemble.log:
        log.debug("mapreduce %s", event)
    return RfModel(vocab, ensemble, data.class_map, cfg)


# --- LSTM --------------------------------------------------------------------

def lstm_sequences(records, cfg: RunConfig, dtype=np.float64):
    """One-hot ``(T, 137)`` arrays, oldest cause first unless ``certificate_order``."""
    out = []
    for ch in chains(records, cfg):
        seq = ch if cfg.certificate_order else tuple(reversed(ch))
        out.append(encode_chain(seq, dtype))
    return out


@dataclass
class LstmModel:
    params: dict
    net: lstm.NetworkConfig
    class_map: ClassMap
    config: RunConfig
    trace: list = field(default_factory=list)

    def predict(self, records):
        seqs = lstm_sequences(records, self.config, np.dtype(self.net.dtype))
        logits = lstm.predict_logits(seqs, self.params, self.net)
        return np.argmax(logits, axis=1), lstm.softmax(logits)

    def save(self, path):
        meta = {"class_map": self.class_map.to_obj(), "run": self.config.to_dict()}
        lstm.save_model(path, self.params, self.net, meta)

    @classmethod
    def load(cls, path) -> "LstmModel":
        params, net, meta = lstm.load_model(path)
        run = meta["run"]
        cfg = RunConfig.from_dict({**run, "orders": tuple(run["orders"])})
        return cls(params, net, ClassMap.from_obj(meta["class_map"]), cfg)


def train_lstm(data: Prepared, cfg: RunConfig, progress=None) -> LstmModel:
    net = cfg.network_config(data.n_classes)
    dt = np.dtype(net.dtype)
    seqs = lstm_sequences(data.train, cfg, dt)
    test_seqs = lstm_sequences(data.test, cfg, dt) if data.test else None
    params, trace = lstm.train(seqs, labels(data.train), net, test_seqs,
                               labels(data.test) if data.test else None, log=progress)
    return LstmModel(params, net, data.class_map, cfg, trace)


def extract_intermediate(records, model: LstmModel):
    """Eval-mode top-layer features with infectious flags of the underlying cause."""
    seqs = lstm_sequences(records, model.config, np.dtype(model.net.dtype))
    feats = lstm.features(seqs, model.params, model.net)
    flags = [is_infectious(r.underlying) for r in records]
    return feats, flags


# --- shared ------------------------------------------------------------------

def train_model(data: Prepared, cfg: RunConfig, progress=None):
    return train_rf(data, cfg) if cfg.model == "rf" else train_lstm(data, cfg, progress)


def evaluate(model, records, name: Optional[str] = None) -> MetricsReport:
    pred, _ = model.predict(records)
    cfg = model.config
    if name is None:
        name = f"rf{{{','.join(map(str, cfg.orders))}}}" if cfg.model == "rf" else "lstm"
    return MetricsReport.from_predictions(labels(records), pred, len(model.class_map), name,
                                          cfg.to_dict(), model.class_map.recode_ids)


def load_model(path):
    """Load either model family from its file."""
    obj = json.loads(Path(path).read_text())
    fmt = obj.get("format")
    if fmt == RF_FORMAT:
        return RfModel.from_obj(obj)
    if fmt == lstm.FORMAT:
        return LstmModel.load(path)
    raise ModelFormatError(f"{path}: unknown model format {fmt!r}")
