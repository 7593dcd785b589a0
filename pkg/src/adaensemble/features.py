"""Raw tabular records to embedded feature maps.

Continuous columns are discretized (equal-frequency bins, or the
``floor(ln(v^2))`` transform), every column is then mapped through a
frequency-thresholded vocabulary, and each field's index selects a row of its
own embedding table. Index 0 of every vocabulary is the out-of-vocabulary /
infrequent bucket.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autograd import Tensor, stack, take
from .rng import glorot_uniform

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"

# floor(ln(0^2)) does not exist; zero gets its own bucket.
LOG_SQUARE_ZERO = -(2**62)
MISSING = "__missing__"
OOV = 0


class SchemaError(ValueError):
    pass


class FitError(ValueError):
    pass


class DataError(ValueError):
    """A data file could not be parsed; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str = CATEGORICAL


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple[FieldSpec, ...]
    embedding_dim: int = 8

    def __post_init__(self) -> None:
        if not self.fields:
            raise SchemaError("schema needs at least one field")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in {names}")
        for f in self.fields:
            if f.kind not in (CONTINUOUS, CATEGORICAL):
                raise SchemaError(f"field {f.name!r}: kind must be continuous or categorical, got {f.kind!r}")
        if self.embedding_dim < 1:
            raise SchemaError("embedding_dim must be positive")

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    def to_dict(self) -> dict:
        return {
            "fields": [{"name": f.name, "kind": f.kind} for f in self.fields],
            "embedding_dim": self.embedding_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSchema:
        try:
            fields = tuple(FieldSpec(f["name"], f.get("kind", CATEGORICAL)) for f in d["fields"])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc}") from exc
        return cls(fields, int(d.get("embedding_dim", 8)))

    @classmethod
    def load(cls, path: str | Path) -> FeatureSchema:
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def categorical(cls, num_fields: int, embedding_dim: int = 8) -> FeatureSchema:
        return cls(tuple(FieldSpec(f"c{i}") for i in range(num_fields)), embedding_dim)


def log_square_transform(v: float) -> int:
    """``floor(ln(v**2))``; zero maps to ``LOG_SQUARE_ZERO``."""
    if v == 0:
        return LOG_SQUARE_ZERO
    # 2*ln|v| avoids overflow of v*v for huge magnitudes
    return math.floor(2.0 * math.log(abs(v)))


@dataclass(frozen=True)
class Bucketizer:
    """Equal-frequency bin boundaries for one continuous column."""

    boundaries: tuple[float, ...]
    bin_count: int

    def bucket(self, v: float) -> int:
        return int(np.searchsorted(np.asarray(self.boundaries), v, side="right"))

    def bucket_many(self, values: np.ndarray) -> np.ndarray:
        return np.searchsorted(np.asarray(self.boundaries), values, side="right")


def fit_bucketizer(values: Sequence[float], bins: int) -> Bucketizer:
    """Cut sorted values into ``bins`` runs of (nearly) equal size.

    A cut falling between two equal values is dropped, so heavily tied
    columns end up with fewer bins.
    """
    if bins < 2:
        raise FitError("bins must be at least 2")
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise FitError("cannot fit a bucketizer on an empty column")
    if not np.all(np.isfinite(v)):
        raise FitError("bucketizer input must be finite")
    n = v.size
    bounds: list[float] = []
    for i in range(1, bins):
        cut = (i * n) // bins
        if cut <= 0 or cut >= n:
            continue
        lo, hi = v[cut - 1], v[cut]
        if lo < hi:
            b = float((lo + hi) / 2.0)
            if not bounds or b > bounds[-1]:
                bounds.append(b)
    return Bucketizer(tuple(bounds), bins)


@dataclass
class Vocabulary:
    """Per-field level -> index maps; indices start at 1, 0 is out-of-vocabulary."""

    index: list[dict[str, int]]
    min_frequency: int
    dropped: list[int] = field(default_factory=list)

    def encode(self, field_idx: int, level: str) -> int:
        return self.index[field_idx].get(level, OOV)

    def sizes(self) -> list[int]:
        return [len(m) for m in self.index]


def fit_vocabulary(records: Iterable[Sequence[str]], schema: FeatureSchema, min_frequency: int = 20) -> Vocabulary:
    """Keep levels seen at least ``min_frequency`` times, ordered by count desc then lexically."""
    if min_frequency < 1:
        raise FitError("min_frequency must be >= 1")
    counts = [Counter() for _ in schema.fields]
    for row in records:
        if len(row) != schema.num_fields:
            raise SchemaError(f"record has {len(row)} columns, schema has {schema.num_fields}")
        for c, level in zip(counts, row):
            c[level] += 1
    index = []
    dropped = []
    for c in counts:
        kept = sorted((lvl for lvl, n in c.items() if n >= min_frequency), key=lambda lvl: (-c[lvl], lvl))
        index.append({lvl: i + 1 for i, lvl in enumerate(kept)})
        dropped.append(len(c) - len(kept))
    return Vocabulary(index, min_frequency, dropped)


class EmbeddingTable:
    """One trainable ``(vocab_size + 1) x D`` matrix per field."""

    def __init__(self, tables: Sequence[Tensor]) -> None:
        dims = {t.shape[1] for t in tables}
        if len(dims) != 1:
            raise SchemaError(f"embedding tables disagree on D: {sorted(dims)}")
        self.tables = list(tables)

    @classmethod
    def init(cls, vocab_sizes: Sequence[int], dim: int, rng: np.random.Generator) -> EmbeddingTable:
        return cls(
            [glorot_uniform(rng, (n + 1, dim), name=f"embed.field{i}") for i, n in enumerate(vocab_sizes)]
        )

    @property
    def dim(self) -> int:
        return self.tables[0].shape[1]


def embed(indices: np.ndarray, table: EmbeddingTable) -> Tensor:
    """Look up a batch of encoded records ``(B, F)`` into a ``(B, F, D)`` feature map."""
    indices = np.asarray(indices)
    if indices.ndim == 1:
        indices = indices[None, :]
    if indices.shape[1] != len(table.tables):
        raise SchemaError(f"records have {indices.shape[1]} fields, table has {len(table.tables)}")
    rows = []
    for f, t in enumerate(table.tables):
        col = indices[:, f]
        if col.size and (col.min() < 0 or col.max() >= t.shape[0]):
            raise IndexError(f"field {f}: index out of range for table with {t.shape[0]} rows")
        rows.append(take(t, col, axis=0))
    return stack(rows, axis=1)


@dataclass
class FeaturePipeline:
    """Fitted discretizers plus vocabulary for a schema."""

    schema: FeatureSchema
    bucketizers: dict[str, Bucketizer]
    vocabulary: Vocabulary
    bins: int
    continuous_transform: str = "quantile"

    @classmethod
    def fit(
        cls,
        records: Sequence[Sequence[str]],
        schema: FeatureSchema,
        bins: int = 64,
        min_frequency: int = 20,
        continuous_transform: str = "quantile",
    ) -> FeaturePipeline:
        if continuous_transform not in ("quantile", "log_square"):
            raise FitError(f"unknown continuous transform {continuous_transform!r}")
        if not records:
            raise FitError("cannot fit a pipeline on zero records")
        bucketizers: dict[str, Bucketizer] = {}
        if continuous_transform == "quantile":
            for f, spec in enumerate(schema.fields):
                if spec.kind != CONTINUOUS:
                    continue
                vals = [x for x in (_parse_float(r[f]) for r in records) if x is not None]
                if vals:
                    bucketizers[spec.name] = fit_bucketizer(vals, bins)
                else:
                    bucketizers[spec.name] = Bucketizer((), bins)
        pipe = cls(schema, bucketizers, Vocabulary([], min_frequency), bins, continuous_transform)
        pipe.vocabulary = fit_vocabulary((pipe.levels(r) for r in records), schema, min_frequency)
        return pipe

    def levels(self, record: Sequence[str]) -> list[str]:
        """Discretize one raw record into level strings."""
        out = []
        for spec, raw in zip(self.schema.fields, record):
            if spec.kind == CATEGORICAL:
                out.append(raw)
                continue
            v = _parse_float(raw)
            if v is None:
                out.append(MISSING)
            elif self.continuous_transform == "log_square":
                b = log_square_transform(v)
                out.append("zero" if b == LOG_SQUARE_ZERO else f"l{b}")
            else:
                out.append(f"b{self.bucketizers[spec.name].bucket(v)}")
        return out

    def transform(self, records: Sequence[Sequence[str]]) -> np.ndarray:
        F = self.schema.num_fields
        out = np.zeros((len(records), F), dtype=np.int64)
        for i, r in enumerate(records):
            if len(r) != F:
                raise SchemaError(f"record {i} has {len(r)} columns, schema has {F}")
            for f, lvl in enumerate(self.levels(r)):
                out[i, f] = self.vocabulary.encode(f, lvl)
        return out

    def vocab_sizes(self) -> list[int]:
        return self.vocabulary.sizes()

    def summary(self, records: Sequence[Sequence[str]]) -> list[dict]:
        """Per-field cardinality, rare levels merged into OOV, and OOV rate on ``records``."""
        enc = self.transform(records)
        rows = []
        for f, spec in enumerate(self.schema.fields):
            rows.append(
                {
                    "field": spec.name,
                    "kind": spec.kind,
                    "cardinality": len(self.vocabulary.index[f]),
                    "merged_levels": self.vocabulary.dropped[f] if self.vocabulary.dropped else 0,
                    "oov_rate": float(np.mean(enc[:, f] == OOV)) if len(records) else 0.0,
                }
            )
        return rows

    def to_dict(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "bins": self.bins,
            "continuous_transform": self.continuous_transform,
            "min_frequency": self.vocabulary.min_frequency,
            "bucketizers": {k: list(b.boundaries) for k, b in sorted(self.bucketizers.items())},
            "vocabulary": [sorted(m.items(), key=lambda kv: kv[1]) for m in self.vocabulary.index],
            "dropped": list(self.vocabulary.dropped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeaturePipeline:
        bins = int(d["bins"])
        vocab = Vocabulary(
            [{lvl: int(i) for lvl, i in pairs} for pairs in d["vocabulary"]],
            int(d["min_frequency"]),
            list(d.get("dropped", [])),
        )
        buckets = {k: Bucketizer(tuple(v), bins) for k, v in d["bucketizers"].items()}
        return cls(FeatureSchema.from_dict(d["schema"]), buckets, vocab, bins, d["continuous_transform"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> FeaturePipeline:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _parse_float(raw: str) -> float | None:
    if raw == "" or raw is None:
        return None
    try:
        v = float(raw)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def read_delimited(path: str | Path, num_fields: int | None = None, delimiter: str = "\t") -> tuple[np.ndarray, list[list[str]]]:
    """Read ``label<delim>f1<delim>...`` lines into (labels, raw records)."""
    labels: list[int] = []
    records: list[list[str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split(delimiter)
            if num_fields is None:
                num_fields = len(parts) - 1  # first row fixes the arity
            if len(parts) != num_fields + 1:
                raise DataError(f"expected {num_fields + 1} columns, found {len(parts)}", lineno)
            if parts[0] not in ("0", "1"):
                raise DataError(f"label must be 0 or 1, got {parts[0]!r}", lineno)
            labels.append(int(parts[0]))
            records.append(parts[1:])
    return np.asarray(labels, dtype=np.float64), records


def write_delimited(path: str | Path, labels: Sequence[int], records: Sequence[Sequence[str]], delimiter: str = "\t") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for y, r in zip(labels, records):
            fh.write(delimiter.join([str(int(y)), *r]) + "\n")
