"""Synthetic multiple-cause records drawn from class-specific Markov chains.

Each class k walks a first-order chain over a cause alphabet with
transition matrix ``strength * M_k + (1 - strength) * B`` where ``B`` is a
background shared by all classes. The first cause is drawn from that
matrix's stationary distribution. The oldest cause sits at the end of the
certificate's Part I, followed by the class's underlying-cause code.

:func:`permuted_pair_spec` builds classes in pairs whose class matrices are
transposes of each other over a doubly stochastic base, so both members
of a pair share the uniform stationary distribution and their chains are
time reversals of one another: the multiset of causes carries no
information about which member of the pair produced it, only the order
does.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataset import MAX_CHAIN, DeathRecord
from .errors import InvalidSpec
from .icd import UNNATURAL_RECODES, IcdCode, RecodeTable, format_code, parse_code

_ALPHABET_LETTERS = "IJKNEG"
_PART2_LETTER = "R"


def default_alphabet(size: int) -> list[IcdCode]:
    if size > 100 * len(_ALPHABET_LETTERS):
        raise InvalidSpec(f"alphabet_size: at most {100 * len(_ALPHABET_LETTERS)}")
    return [
        IcdCode(_ALPHABET_LETTERS[j // 100], j % 100, (3 * j + 1) % 10) for j in range(size)
    ]


def default_underlying(n_classes: int, table: Optional[RecodeTable] = None) -> list[IcdCode]:
    """First code of each of the first ``n_classes`` natural recode groups."""
    table = table or RecodeTable.demo()
    ids = sorted({e.recode_id for e in table.entries} - UNNATURAL_RECODES)
    if n_classes > len(ids):
        raise InvalidSpec(f"classes: the recode table has only {len(ids)} natural groups")
    return [table.first_code(r) for r in ids[:n_classes]]


@dataclass
class SynthSpec:
    n_classes: int
    records_per_class: int
    alphabet_size: int
    matrices: list  # one (A, A) row-stochastic array per class
    chain_length: tuple = (2, 6)  # causes before the underlying code, inclusive
    strength: float = 1.0
    seed: int = 0
    background: Optional[np.ndarray] = None  # uniform when None
    part2_max: int = 2
    underlying: Optional[list] = None  # IcdCode per class
    alphabet: Optional[list] = None  # IcdCode per cause token
    extra: dict = field(default_factory=dict)

    def validate(self):
        if not isinstance(self.n_classes, int) or self.n_classes < 1:
            raise InvalidSpec(f"classes: must be a positive integer, got {self.n_classes!r}")
        if self.records_per_class < 0:
            raise InvalidSpec("records_per_class: must be non-negative")
        if self.alphabet_size < 1:
            raise InvalidSpec("alphabet_size: must be positive")
        if not 0.0 <= self.strength <= 1.0:
            raise InvalidSpec(f"strength: must lie in [0, 1], got {self.strength!r}")
        lo, hi = self.chain_length
        if not 1 <= lo <= hi <= MAX_CHAIN - 1:
            raise InvalidSpec(
                f"chain_length: need 1 <= min <= max <= {MAX_CHAIN - 1}, got {lo},{hi}"
            )
        if self.part2_max < 0:
            raise InvalidSpec("part2_max: must be non-negative")
        if len(self.matrices) != self.n_classes:
            raise InvalidSpec(
                f"matrices: expected {self.n_classes} class matrices, got {len(self.matrices)}"
            )
        a = self.alphabet_size
        mats = list(self.matrices)
        if self.background is not None:
            mats.append(self.background)
        for k, m in enumerate(mats):
            m = np.asarray(m, dtype=float)
            name = f"matrix {k}" if k < self.n_classes else "background"
            if m.shape != (a, a):
                raise InvalidSpec(f"{name}: expected shape ({a}, {a}), got {m.shape}")
            if (m < 0).any() or np.abs(m.sum(axis=1) - 1.0).max() > 1e-9:
                raise InvalidSpec(f"{name}: rows must be non-negative and sum to 1")
        if self.underlying is not None and len(self.underlying) != self.n_classes:
            raise InvalidSpec("underlying: one code per class required")
        if self.alphabet is not None and len(self.alphabet) != a:
            raise InvalidSpec("alphabet: one code per cause token required")
        return self

    def background_matrix(self) -> np.ndarray:
        if self.background is None:
            a = self.alphabet_size
            return np.full((a, a), 1.0 / a)
        return np.asarray(self.background, dtype=float)

    def transition(self, k: int) -> np.ndarray:
        lam = self.strength
        return lam * np.asarray(self.matrices[k], dtype=float) + (1 - lam) * self.background_matrix()


def stationary(p: np.ndarray) -> np.ndarray:
    """Stationary distribution; exactly uniform for doubly stochastic ``p``."""
    a = p.shape[0]
    if np.abs(p.sum(axis=0) - 1.0).max() < 1e-12:
        return np.full(a, 1.0 / a)
    system = np.vstack([p.T - np.eye(a), np.ones((1, a))])
    rhs = np.zeros(a + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def _draw(cdf: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def generate_synthetic(spec: SynthSpec) -> list[DeathRecord]:
    """Draw ``records_per_class`` records for every class, deterministically."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    alphabet = spec.alphabet or default_alphabet(spec.alphabet_size)
    underlying = spec.underlying or default_underlying(spec.n_classes)
    part2_pool = [IcdCode(_PART2_LETTER, m, None) for m in range(100)]
    lo, hi = spec.chain_length
    records = []
    for k in range(spec.n_classes):
        p = spec.transition(k)
        start = stationary(p)
        cdf = np.cumsum(p, axis=1)
        start_cdf = np.cumsum(start)
        for i in range(spec.records_per_class):
            length = int(rng.integers(lo, hi + 1))
            x = _draw(start_cdf, rng.random())
            tokens = [x]
            for _ in range(length - 1):
                x = _draw(cdf[x], rng.random())
                tokens.append(x)
            # certificate order: most recent first, underlying last
            part1 = tuple(alphabet[t] for t in reversed(tokens)) + (underlying[k],)
            n2 = int(rng.integers(0, spec.part2_max + 1)) if spec.part2_max else 0
            part2 = tuple(part2_pool[j] for j in rng.choice(100, size=n2, replace=False))
            records.append(DeathRecord(f"syn-{k:03d}-{i:06d}", part1, part2, underlying[k]))
    return records


def _random_permutation_matrix(a: int, rng) -> np.ndarray:
    m = np.zeros((a, a))
    m[np.arange(a), rng.permutation(a)] = 1.0
    return m


def permuted_pair_spec(
    n_classes: int,
    records_per_class: int,
    alphabet_size: int = 12,
    strength: float = 1.0,
    seed: int = 0,
    chain_length=(2, 6),
    weights: Sequence[float] = (0.7, 0.3),
    part2_max: int = 2,
) -> SynthSpec:
    """Spec whose classes come in transposed pairs.

    Class ``2p`` uses a mixture of random permutation matrices (doubly
    stochastic), class ``2p + 1`` its transpose. An odd last class gets an
    unpaired mixture.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    mats = []
    while len(mats) < n_classes:
        base = sum(w * _random_permutation_matrix(alphabet_size, rng) for w in weights)
        base = base / base.sum(axis=1, keepdims=True)
        mats.append(base)
        if len(mats) < n_classes:
            mats.append(base.T.copy())
    spec = SynthSpec(
        n_classes=n_classes,
        records_per_class=records_per_class,
        alphabet_size=alphabet_size,
        matrices=mats,
        chain_length=tuple(chain_length),
        strength=strength,
        seed=seed,
        part2_max=part2_max,
    )
    return spec.validate()


# --- spec file ---------------------------------------------------------------

def _fmt_row(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def dumps_spec(spec: SynthSpec) -> str:
    lines = [
        f"classes={spec.n_classes}",
        f"records_per_class={spec.records_per_class}",
        f"alphabet_size={spec.alphabet_size}",
        f"chain_length={spec.chain_length[0]},{spec.chain_length[1]}",
        f"strength={spec.strength!r}",
        f"seed={spec.seed}",
        f"part2_max={spec.part2_max}",
    ]
    if spec.underlying is not None:
        lines.append("underlying=" + ",".join(format_code(c) for c in spec.underlying))
    if spec.alphabet is not None:
        lines.append("alphabet=" + ",".join(format_code(c) for c in spec.alphabet))
    for k, m in enumerate(spec.matrices):
        lines.append(f"[matrix {k}]")
        lines.extend(_fmt_row(r) for r in np.asarray(m))
    if spec.background is not None:
        lines.append("[background]")
        lines.extend(_fmt_row(r) for r in np.asarray(spec.background))
    return "\n".join(lines) + "\n"


def _int(field_name, value):
    try:
        return int(value)
    except ValueError:
        raise InvalidSpec(f"{field_name}: expected an integer, got {value!r}") from None


def parse_spec(text: str) -> SynthSpec:
    keys = {}
    blocks: dict = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise InvalidSpec(f"line {lineno}: unterminated block header")
            current = line[1:-1].strip()
            blocks[current] = []
            continue
        if current is None:
            if "=" not in line:
                raise InvalidSpec(f"line {lineno}: expected key=value")
            k, v = line.split("=", 1)
            keys[k.strip()] = v.strip()
        else:
            try:
                blocks[current].append([float(x) for x in line.split()])
            except ValueError:
                raise InvalidSpec(f"{current}: non-numeric matrix entry on line {lineno}") from None

    for required in ("classes", "records_per_class", "alphabet_size"):
        if required not in keys:
            raise InvalidSpec(f"{required}: missing")
    n = _int("classes", keys["classes"])
    try:
        strength = float(keys.get("strength", "1.0"))
        lo, hi = (int(x) for x in keys.get("chain_length", "2,6").split(","))
    except ValueError as exc:
        raise InvalidSpec(f"strength/chain_length: {exc}") from None
    mats = []
    for k in range(n):
        if f"matrix {k}" not in blocks:
            raise InvalidSpec(f"matrix {k}: missing block")
        mats.append(np.array(blocks[f"matrix {k}"], dtype=float))
    bg = np.array(blocks["background"], dtype=float) if "background" in blocks else None
    und = keys.get("underlying")
    alph = keys.get("alphabet")
    spec = SynthSpec(
        n_classes=n,
        records_per_class=_int("records_per_class", keys["records_per_class"]),
        alphabet_size=_int("alphabet_size", keys["alphabet_size"]),
        matrices=mats,
        chain_length=(lo, hi),
        strength=strength,
        seed=_int("seed", keys.get("seed", "0")),
        background=bg,
        part2_max=_int("part2_max", keys.get("part2_max", "2")),
        underlying=[parse_code(c) for c in und.split(",")] if und else None,
        alphabet=[parse_code(c) for c in alph.split(",")] if alph else None,
    )
    return spec.validate()


def load_spec(path) -> SynthSpec:
    return parse_spec(Path(path).read_text())


def save_spec(spec: SynthSpec, path) -> None:
    Path(path).write_text(dumps_spec(spec))
