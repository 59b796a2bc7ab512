"""Death-record ingestion, filtering, class labelling and splitting."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import EmptyResult, InvalidSpec, MalformedCode, MalformedRecord
from .icd import UNNATURAL_RECODES, IcdCode, RecodeTable, format_code, parse_code

log = logging.getLogger(__name__)

MAX_CHAIN = 20


@dataclass(frozen=True)
class DeathRecord:
    """One certificate.

    ``part1`` is in certificate order: immediate cause first, the oldest
    condition last.
    """

    id: str
    part1: tuple[IcdCode, ...]
    part2: tuple[IcdCode, ...] = ()
    underlying: Optional[IcdCode] = None
    label: Optional[int] = None
    recode: Optional[int] = None

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "part1": [format_code(c) for c in self.part1],
            "part2": [format_code(c) for c in self.part2],
            "underlying": format_code(self.underlying) if self.underlying else None,
        }
        if self.label is not None:
            obj["label"] = self.label
        if self.recode is not None:
            obj["recode"] = self.recode
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_obj(cls, obj) -> "DeathRecord":
        if not isinstance(obj, dict):
            raise MalformedRecord("record must be an object")
        try:
            rid = obj["id"]
            part1 = obj["part1"]
            part2 = obj.get("part2", [])
            underlying = obj["underlying"]
        except KeyError as exc:
            raise MalformedRecord(f"missing field {exc.args[0]!r}") from None
        if not isinstance(rid, str):
            raise MalformedRecord("id must be a string")
        if not isinstance(part1, list) or not isinstance(part2, list):
            raise MalformedRecord("part1 and part2 must be arrays")
        if not isinstance(underlying, str):
            raise MalformedRecord("underlying must be a code string")
        try:
            p1 = tuple(parse_code(s) for s in part1)
            p2 = tuple(parse_code(s) for s in part2)
            u = parse_code(underlying)
        except MalformedCode as exc:
            raise MalformedRecord(str(exc)) from None
        label = obj.get("label")
        rec = obj.get("recode")
        return cls(rid, p1, p2, u, label, rec)


@dataclass
class FilterReport:
    input_count: int = 0
    malformed: int = 0
    underlying_not_in_part1: int = 0
    unnatural: int = 0
    rare_class: int = 0
    truncated: int = 0  # warning count, not a drop reason
    retained: int = 0
    classes: list = field(default_factory=list)  # retained recode ids, dense order
    errors: list = field(default_factory=list)  # (line number, message)
    class_map: Optional["ClassMap"] = None

    @property
    def dropped(self) -> int:
        return self.malformed + self.underlying_not_in_part1 + self.unnatural + self.rare_class

    def summary(self) -> str:
        return (
            f"input={self.input_count} retained={self.retained} malformed={self.malformed} "
            f"underlying_not_in_part1={self.underlying_not_in_part1} unnatural={self.unnatural} "
            f"rare_class={self.rare_class} truncated={self.truncated} classes={len(self.classes)}"
        )


class ClassMap:
    """Dense label <-> recode id mapping, persisted as ``RECODE_ID,DENSE_LABEL,NAME``."""

    def __init__(self, recode_ids, names=None):
        self.recode_ids = list(recode_ids)
        self.names = dict(names or {})
        self._dense = {r: i for i, r in enumerate(self.recode_ids)}

    def __len__(self):
        return len(self.recode_ids)

    def __eq__(self, other):
        return isinstance(other, ClassMap) and self.recode_ids == other.recode_ids

    def dense(self, recode_id: int) -> int:
        return self._dense[recode_id]

    def recode(self, label: int) -> int:
        return self.recode_ids[label]

    def dumps(self) -> str:
        return "".join(
            f"{r},{i},{self.names.get(r, '')}\n" for i, r in enumerate(self.recode_ids)
        )

    @classmethod
    def parse(cls, text: str) -> "ClassMap":
        rows = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            rid, dense, name = (line.split(",", 2) + [""])[:3]
            rows.append((int(dense), int(rid), name))
        rows.sort()
        if [d for d, _, _ in rows] != list(range(len(rows))):
            raise ValueError("class map dense labels must be 0..K-1")
        return cls([r for _, r, _ in rows], {r: n for _, r, n in rows})

    def to_obj(self):
        return {"recode_ids": self.recode_ids, "names": {str(k): v for k, v in self.names.items()}}

    @classmethod
    def from_obj(cls, obj):
        return cls(obj["recode_ids"], {int(k): v for k, v in obj.get("names", {}).items()})


def read_records(lines: Iterable[str], report: Optional[FilterReport] = None) -> Iterator[DeathRecord]:
    """Parse JSON-lines records; malformed lines are logged into ``report``."""
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = DeathRecord.from_obj(json.loads(line))
        except (json.JSONDecodeError, MalformedRecord) as exc:
            if report is None:
                raise MalformedRecord(f"line {lineno}: {exc}") from None
            report.malformed += 1
            report.errors.append((lineno, str(exc)))
            continue
        yield rec


def load_records(path, report: Optional[FilterReport] = None) -> Iterator[DeathRecord]:
    """Stream records from a JSON-lines file in file order.

    Pass a :class:`FilterReport` to collect per-line errors instead of
    raising on the first malformed line.
    """
    with open(path, encoding="utf-8") as fh:
        yield from read_records(fh, report)


def write_records(records: Iterable[DeathRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
            n += 1
    return n


def filter_and_label(
    records: Iterable[DeathRecord],
    table: RecodeTable,
    min_class_count: int = 1000,
    report: Optional[FilterReport] = None,
    max_chain: int = MAX_CHAIN,
):
    """Apply the cohort rules and assign dense class labels.

    Part II is discarded, chains longer than ``max_chain`` lose their oldest
    codes, then records are dropped when the underlying cause is not in
    Part I, when it recodes to an unnatural manner (111-113), or when its
    class has fewer than ``min_class_count`` members. Returns the retained
    records and the report; ``report.classes`` holds the recode id for
    each dense label.
    """
    if report is None:
        report = FilterReport()
    kept = []
    seen = 0
    for r in records:
        seen += 1
        part1 = r.part1
        if len(part1) > max_chain:
            part1 = part1[:max_chain]
            report.truncated += 1
        if r.underlying is None or r.underlying not in part1:
            report.underlying_not_in_part1 += 1
            continue
        rid = table.recode(r.underlying)  # UnmappedCode propagates: table gap
        if rid in UNNATURAL_RECODES:
            report.unnatural += 1
            continue
        kept.append(replace(r, part1=part1, part2=(), recode=rid))
    report.input_count = report.malformed + seen
    if report.truncated:
        log.warning("%d Part I chains truncated to %d codes", report.truncated, max_chain)

    counts = Counter(r.recode for r in kept)
    retained_ids = sorted(k for k, n in counts.items() if n >= min_class_count)
    report.rare_class += sum(n for k, n in counts.items() if n < min_class_count)
    if not retained_ids:
        raise EmptyResult(f"no class has at least {min_class_count} records")
    cmap = ClassMap(retained_ids, {k: table.label(k) for k in retained_ids})
    out = [replace(r, label=cmap.dense(r.recode)) for r in kept if r.recode in cmap._dense]
    report.retained = len(out)
    report.classes = list(retained_ids)
    report.class_map = cmap
    return out, report


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    test: float = 0.2
    holdout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.test, self.holdout)
        if any(f < 0 for f in fr):
            raise InvalidSpec("split fractions must be non-negative")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise InvalidSpec(f"split fractions must sum to 1, got {sum(fr)!r}")


def _allocate(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [math.floor(x) for x in raw]
    rest = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return sizes


def split(records, spec: SplitSpec = SplitSpec()):
    """Seeded shuffle into (train, test, holdout)."""
    records = list(records)
    n_train, n_test, _ = _allocate(len(records), (spec.train, spec.test, spec.holdout))
    perm = np.random.default_rng(spec.seed).permutation(len(records))
    shuffled = [records[i] for i in perm]
    return (
        shuffled[:n_train],
        shuffled[n_train:n_train + n_test],
        shuffled[n_train + n_test:],
    )


def model_chain(record: DeathRecord, drop_terminal: bool = False) -> tuple[IcdCode, ...]:
    """Part I codes fed to the models, certificate order.

    With ``drop_terminal`` the oldest code is removed, which keeps the
    underlying cause out of the input when it closes the chain.
    """
    chain = record.part1
    if drop_terminal:
        chain = chain[:-1]
    return chain
