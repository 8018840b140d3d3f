"""CSV click logs to per-field categorical indices.

Each field owns a contiguous block of the global feature index space.  Local
index 0 of every field is reserved for out-of-vocabulary and missing tokens,
so a field with ``c`` known tokens occupies ``c + 1`` global indices.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import DomainError, SeededRng

CATEGORICAL = "categorical"
NUMERIC = "numeric"


class SchemaError(ValueError):
    """Input data does not match the declared schema."""


class ParseError(ValueError):
    """A cell could not be parsed (e.g. a label outside {0, 1})."""


@dataclass(frozen=True)
class FieldSchema:
    fields: tuple[tuple[str, str], ...]
    label_column: str = "label"

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple((str(n), str(k)) for n, k in self.fields))
        names = self.names
        if not names:
            raise SchemaError("schema needs at least one feature field")
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        if self.label_column in names:
            raise SchemaError(f"label column {self.label_column!r} is also a feature field")
        for name, kind in self.fields:
            if kind not in (CATEGORICAL, NUMERIC):
                raise SchemaError(f"field {name!r}: unknown kind {kind!r}")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.fields]

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    def to_dict(self) -> dict:
        return {
            "fields": [{"name": n, "kind": k} for n, k in self.fields],
            "label_column": self.label_column,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FieldSchema":
        return cls(tuple((f["name"], f.get("kind", CATEGORICAL)) for f in d["fields"]),
                   d.get("label_column", "label"))


@dataclass
class Vocabulary:
    """Field-scoped token maps plus the global offset table."""

    tokens: list[dict[str, int]]

    @property
    def cardinalities(self) -> list[int]:
        return [len(t) + 1 for t in self.tokens]

    @property
    def offsets(self) -> list[int]:
        out, acc = [], 0
        for c in self.cardinalities:
            out.append(acc)
            acc += c
        return out

    @property
    def total_features(self) -> int:
        return sum(self.cardinalities)

    def global_index(self, f: int, token: str) -> int:
        return self.offsets[f] + self.tokens[f].get(token, 0)

    def decode(self, index: int) -> tuple[int, str | None]:
        """Map a global index back to ``(field, token)``; token is None for OOV."""
        for f, (off, card) in enumerate(zip(self.offsets, self.cardinalities)):
            if off <= index < off + card:
                local = index - off
                if local == 0:
                    return f, None
                for tok, i in self.tokens[f].items():
                    if i == local:
                        return f, tok
        raise IndexError(f"global index {index} outside vocabulary")

    def to_list(self) -> list[list[str]]:
        # tokens in index order; position i holds local index i + 1
        return [sorted(t, key=t.__getitem__) for t in self.tokens]

    @classmethod
    def from_list(cls, lists: list[list[str]]) -> "Vocabulary":
        return cls([{tok: i + 1 for i, tok in enumerate(toks)} for toks in lists])


@dataclass(frozen=True)
class EncodedSample:
    indices: tuple[int, ...]
    label: int


@dataclass
class Dataset:
    schema: FieldSchema
    vocab: Vocabulary
    samples: list[EncodedSample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Index matrix ``(N, M)`` and float label vector ``(N,)``."""
        m = self.schema.num_fields
        x = np.array([s.indices for s in self.samples], dtype=np.int64).reshape(-1, m)
        y = np.array([s.label for s in self.samples], dtype=np.float64)
        return x, y


def parse_label(raw: str, line: int | None = None) -> int:
    if raw.strip() in ("0", "1"):
        return int(raw.strip())
    where = f" on line {line}" if line is not None else ""
    raise ParseError(f"label must be 0 or 1, got {raw!r}{where}")


def load_csv(path, schema: FieldSchema, require_label: bool = True) -> list[dict[str, str]]:
    """Read raw records keyed by column name; empty cells stay empty strings.

    Plain comma splitting only: quoted cells are not supported.
    """
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected a header line") from None
        wanted = schema.names + ([schema.label_column] if require_label else [])
        for col in wanted:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        cols = {name: header.index(name) for name in schema.names}
        label_at = header.index(schema.label_column) if schema.label_column in header else None
        records = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < len(header):
                row = row + [""] * (len(header) - len(row))
            rec = {name: row[i] for name, i in cols.items()}
            if label_at is not None:
                parse_label(row[label_at], lineno)
                rec[schema.label_column] = row[label_at]
            records.append(rec)
    return records


def bucketize_numeric(value: str) -> str:
    try:
        v = float(value)
    except (TypeError, ValueError):
        return "B_miss"
    if math.isnan(v):
        return "B_miss"
    if v <= 0:
        return "B_neg"
    if math.isinf(v):
        return "B_inf"
    return f"B_{math.floor(math.log1p(v))}"


def _token(value: str, kind: str) -> str:
    return bucketize_numeric(value) if kind == NUMERIC else value


def build_vocab(records: Sequence[dict], schema: FieldSchema, min_count: int = 2) -> Vocabulary:
    """Count tokens per field; keep those seen at least ``min_count`` times.

    Must only ever see training records.  Kept tokens are ordered by
    descending count, ties broken by the token string.
    """
    if not records:
        raise DomainError("cannot build a vocabulary from zero records")
    maps = []
    for name, kind in schema.fields:
        counts = Counter(_token(r.get(name, ""), kind) for r in records)
        kept = sorted((t for t, c in counts.items() if c >= min_count),
                      key=lambda t: (-counts[t], t))
        maps.append({t: i + 1 for i, t in enumerate(kept)})
    return Vocabulary(maps)


def encode(record: dict, schema: FieldSchema, vocab: Vocabulary, label: bool = True) -> EncodedSample:
    offsets = vocab.offsets
    idx = tuple(
        offsets[f] + vocab.tokens[f].get(_token(record.get(name, ""), kind), 0)
        for f, (name, kind) in enumerate(schema.fields)
    )
    y = parse_label(record[schema.label_column]) if label else 0
    return EncodedSample(idx, y)


def encode_all(records, schema, vocab, label: bool = True) -> Dataset:
    return Dataset(schema, vocab, [encode(r, schema, vocab, label) for r in records])


def split(items, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle then contiguous ``(train, validation, test)`` cut.

    Validation and test get ``floor(N * r)`` items; the remainder goes to
    train.  Accepts a :class:`Dataset` (returns Datasets) or any sequence
    (returns lists).
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DomainError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    seq = items.samples if isinstance(items, Dataset) else list(items)
    n = len(seq)
    if n < 3:
        raise DomainError(f"need at least 3 items to split, got {n}")
    n_val = math.floor(n * ratios[1])
    n_test = math.floor(n * ratios[2])
    n_train = n - n_val - n_test
    order = SeededRng(seed).permutation(n)
    shuffled = [seq[i] for i in order]
    parts = (shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:])
    if isinstance(items, Dataset):
        return tuple(Dataset(items.schema, items.vocab, p) for p in parts)
    return parts
