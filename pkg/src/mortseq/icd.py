"""ICD-10 mortality code parsing, one-hot encoding and recode lookup.

A code is split into its group letter, two-digit major category and an
optional etiology digit. The one-hot layout is::

    [ letter (26) | major (100) | etiology 0-9 (10) | etiology absent (1) ]

so every code sets exactly three of the 137 bits.
"""
from __future__ import annotations

import bisect
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import InvalidTable, MalformedCode, UnmappedCode

N_LETTERS = 26
N_MAJOR = 100
N_ETIOLOGY = 10
MAJOR_OFFSET = N_LETTERS
ETIOLOGY_OFFSET = N_LETTERS + N_MAJOR
ABSENT_SLOT = ETIOLOGY_OFFSET + N_ETIOLOGY
ONE_HOT_DIM = ABSENT_SLOT + 1  # 137

UNNATURAL_RECODES = frozenset({111, 112, 113})
DEMO_TABLE = "recode113_demo.csv"

_CODE_RE = re.compile(r"^([A-Z])(\d{2})(?:\.?(\d))?$")


@dataclass(frozen=True, order=True)
class IcdCode:
    letter: str
    major: int
    etiology: Optional[int] = None

    def __post_init__(self):
        if not (len(self.letter) == 1 and "A" <= self.letter <= "Z"):
            raise MalformedCode(f"group letter must be A-Z, got {self.letter!r}")
        if not (isinstance(self.major, int) and 0 <= self.major <= 99):
            raise MalformedCode(f"major code must be 0-99, got {self.major!r}")
        if self.etiology is not None and not (
            isinstance(self.etiology, int) and 0 <= self.etiology <= 9
        ):
            raise MalformedCode(f"etiology must be 0-9, got {self.etiology!r}")

    def __str__(self):
        return format_code(self)

    @property
    def key(self):
        """Total order used for range lookups; an absent etiology sorts first."""
        return (self.letter, self.major, -1 if self.etiology is None else self.etiology)


def parse_code(s: str) -> IcdCode:
    """Parse ``"E11.2"``, ``"E112"`` or ``"I21"`` into an :class:`IcdCode`.

    Surrounding whitespace is ignored and lowercase letters are accepted.
    """
    if not isinstance(s, str):
        raise MalformedCode(f"code must be a string, got {type(s).__name__}")
    text = s.strip().upper()
    if not text or not text.isascii():
        raise MalformedCode(f"malformed ICD-10 code {s!r}")
    m = _CODE_RE.match(text)
    if m is None:
        if not ("A" <= text[0] <= "Z"):
            raise MalformedCode(f"malformed ICD-10 code {s!r}: bad group letter")
        raise MalformedCode(f"malformed ICD-10 code {s!r}")
    letter, major, etiology = m.groups()
    return IcdCode(letter, int(major), None if etiology is None else int(etiology))


def format_code(c: IcdCode, dot: bool = True) -> str:
    base = f"{c.letter}{c.major:02d}"
    if c.etiology is None:
        return base
    return f"{base}.{c.etiology}" if dot else f"{base}{c.etiology}"


def canonical(s: str) -> str:
    return format_code(parse_code(s))


def one_hot_positions(c: IcdCode) -> tuple[int, int, int]:
    letter = ord(c.letter) - ord("A")
    etiology = ABSENT_SLOT if c.etiology is None else ETIOLOGY_OFFSET + c.etiology
    return letter, MAJOR_OFFSET + c.major, etiology


def encode_one_hot(c: IcdCode) -> np.ndarray:
    bits = np.zeros(ONE_HOT_DIM, dtype=np.uint8)
    bits[list(one_hot_positions(c))] = 1
    return bits


def encode_chain(codes: Iterable[IcdCode], dtype=np.float64) -> np.ndarray:
    """Stack one-hot encodings into a ``(T, 137)`` array."""
    codes = list(codes)
    out = np.zeros((len(codes), ONE_HOT_DIM), dtype=dtype)
    for t, c in enumerate(codes):
        out[t, list(one_hot_positions(c))] = 1
    return out


def is_infectious(c: IcdCode) -> bool:
    return c.letter in ("A", "B")


def all_codes():
    """Every valid code: 26 letters x 100 majors x (10 etiologies + absent)."""
    for i in range(N_LETTERS):
        letter = chr(ord("A") + i)
        for major in range(N_MAJOR):
            yield IcdCode(letter, major, None)
            for e in range(N_ETIOLOGY):
                yield IcdCode(letter, major, e)


@dataclass(frozen=True)
class RecodeEntry:
    lower: IcdCode
    upper: IcdCode
    recode_id: int
    label: str

    @property
    def lower_key(self):
        return self.lower.key

    @property
    def upper_key(self):
        # an upper bound without etiology covers the whole category
        u = self.upper
        return (u.letter, u.major, N_ETIOLOGY if u.etiology is None else u.etiology)

    def contains(self, c: IcdCode) -> bool:
        return self.lower_key <= c.key <= self.upper_key


class RecodeTable:
    """Ordered, non-overlapping code ranges mapped to recode ids 1-113."""

    def __init__(self, entries: Iterable[RecodeEntry]):
        self.entries = sorted(entries, key=lambda e: e.lower_key)
        for e in self.entries:
            if not 1 <= e.recode_id <= 113:
                raise InvalidTable(f"recode id out of range: {e.recode_id}")
            if e.upper_key < e.lower_key:
                raise InvalidTable(f"inverted range {e.lower}-{e.upper}")
        for a, b in zip(self.entries, self.entries[1:]):
            if b.lower_key <= a.upper_key:
                raise InvalidTable(f"overlapping ranges {a.lower}-{a.upper} and {b.lower}-{b.upper}")
        self._lowers = [e.lower_key for e in self.entries]
        self.labels = {}
        for e in self.entries:
            self.labels.setdefault(e.recode_id, e.label)

    def __len__(self):
        return len(self.entries)

    def lookup(self, c: IcdCode) -> RecodeEntry:
        i = bisect.bisect_right(self._lowers, c.key) - 1
        if i >= 0 and self.entries[i].contains(c):
            return self.entries[i]
        raise UnmappedCode(f"code {format_code(c)} is not covered by the recode table")

    def recode(self, c: IcdCode) -> int:
        return self.lookup(c).recode_id

    def label(self, recode_id: int) -> str:
        return self.labels.get(recode_id, "")

    def first_code(self, recode_id: int) -> IcdCode:
        """Lowest code mapping to ``recode_id``."""
        for e in self.entries:
            if e.recode_id == recode_id:
                return e.lower
        raise KeyError(recode_id)

    @classmethod
    def parse(cls, text: str) -> "RecodeTable":
        entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",", 3)
            if len(parts) < 3:
                raise InvalidTable(f"line {lineno}: expected LOWER,UPPER,RECODE_ID,LABEL")
            try:
                lower, upper = parse_code(parts[0]), parse_code(parts[1])
                rid = int(parts[2])
            except (MalformedCode, ValueError) as exc:
                raise InvalidTable(f"line {lineno}: {exc}") from None
            label = parts[3].strip() if len(parts) > 3 else ""
            entries.append(RecodeEntry(lower, upper, rid, label))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "RecodeTable":
        return cls.parse(Path(path).read_text())

    @classmethod
    def demo(cls) -> "RecodeTable":
        text = resources.files("mortseq").joinpath("data").joinpath(DEMO_TABLE).read_text()
        return cls.parse(text)

    def dumps(self) -> str:
        lines = [
            f"{format_code(e.lower, dot=False)},{format_code(e.upper, dot=False)},{e.recode_id},{e.label}"
            for e in self.entries
        ]
        return "\n".join(lines) + "\n"


def recode(c: IcdCode, table: RecodeTable) -> int:
    return table.recode(c)
