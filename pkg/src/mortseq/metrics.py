"""Classification reports: accuracy, per-class precision/recall, confusion matrix."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


@dataclass
class MetricsReport:
    model: str
    confusion: np.ndarray  # rows: true class, columns: predicted class
    config_fingerprint: str = ""
    recode_ids: tuple = ()

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes, model, config=None, recode_ids=()):
        cm = confusion_matrix(y_true, y_pred, n_classes)
        return cls(model, cm, fingerprint(config or {}), tuple(recode_ids))

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion)) / self.n if self.n else float("nan")

    @property
    def random_baseline(self) -> float:
        return 1.0 / self.n_classes

    @property
    def precision(self) -> np.ndarray:
        col = self.confusion.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(col > 0, np.diag(self.confusion) / col, 0.0)

    @property
    def recall(self) -> np.ndarray:
        row = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(row > 0, np.diag(self.confusion) / row, 0.0)

    def to_text(self) -> str:
        lines = [
            f"model: {self.model}",
            f"config: {self.config_fingerprint}",
            f"samples: {self.n}",
            f"classes: {self.n_classes}",
            f"accuracy: {self.accuracy:.4%}",
            f"random baseline (1/K): {self.random_baseline:.4%}",
            "",
            "class  recode  support  precision  recall",
        ]
        support = self.confusion.sum(axis=1)
        for k in range(self.n_classes):
            rid = self.recode_ids[k] if k < len(self.recode_ids) else ""
            lines.append(f"{k:5d}  {rid!s:>6}  {support[k]:7d}  {self.precision[k]:9.4f}  {self.recall[k]:6.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        """Summary row, per-class rows, then the confusion matrix."""
        out = ["section,key,value"]
        out.append(f"summary,model,{self.model}")
        out.append(f"summary,config,{self.config_fingerprint}")
        out.append(f"summary,samples,{self.n}")
        out.append(f"summary,accuracy,{self.accuracy!r}")
        out.append(f"summary,random_baseline,{self.random_baseline!r}")
        for k in range(self.n_classes):
            out.append(f"precision,{k},{float(self.precision[k])!r}")
            out.append(f"recall,{k},{float(self.recall[k])!r}")
        for k in range(self.n_classes):
            out.append(f"confusion,{k}," + " ".join(str(int(v)) for v in self.confusion[k]))
        return "\n".join(out) + "\n"

    def write(self, stem) -> tuple[Path, Path]:
        stem = Path(stem)
        txt, csv = stem.with_suffix(".txt"), stem.with_suffix(".csv")
        txt.write_text(self.to_text())
        csv.write_text(self.to_csv())
        return txt, csv

    @classmethod
    def parse_csv(cls, text: str) -> "MetricsReport":
        model, fp, rows = "", "", {}
        for line in text.splitlines()[1:]:
            section, key, value = line.split(",", 2)
            if section == "summary" and key == "model":
                model = value
            elif section == "summary" and key == "config":
                fp = value
            elif section == "confusion":
                rows[int(key)] = [int(v) for v in value.split()]
        cm = np.array([rows[k] for k in sorted(rows)], dtype=np.int64)
        return cls(model, cm, fp)
