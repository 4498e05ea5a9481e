"""Assessor-table ingestion: parsing, cleaning, categorical codes, z-scoring, splits.

The flow used by the ``preprocess`` stage is::

    raw = load_csv(path)
    cleaned = clean(raw, schema)
    data = preprocess(cleaned, schema, seed=0)

``preprocess`` splits the cleaned rows first and fits the categorical codes and
both normalizers (features and label) on the training partition only, so the
validation and test partitions never leak into the fitted statistics.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import shlex
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

KINDS = (
    "identifier",
    "redundant",
    "categorical",
    "numeric",
    "label_total_land",
    "label_personal",
    "label_total",
    "latitude",
    "longitude",
)
FEATURE_KINDS = ("categorical", "numeric")
LABEL_KINDS = ("label_total_land", "label_personal", "label_total")

FM_MAGIC = b"GVFM"
FM_VERSION = 1
DEFAULT_FRACTIONS = (0.90, 0.05, 0.05)


class TableError(ValueError):
    pass


class RaggedRowError(TableError):
    def __init__(self, row_index: int, expected: int, got: int):
        super().__init__(f"row {row_index}: expected {expected} cells, got {got}")
        self.row_index = row_index


class SchemaMismatchError(TableError):
    pass


@dataclass
class RawTable:
    """Header plus rows of cells; a cell is text, a number, or ``None`` (missing)."""

    column_names: list[str]
    rows: list[list]

    def __post_init__(self):
        if len(set(self.column_names)) != len(self.column_names):
            dupes = [c for c, k in Counter(self.column_names).items() if k > 1]
            raise TableError(f"duplicate column names: {dupes}")
        width = len(self.column_names)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise RaggedRowError(i, width, len(row))

    @property
    def row_count(self) -> int:
        return len(self.rows)

    def index(self, name: str) -> int:
        return self.column_names.index(name)

    def column(self, name: str) -> list:
        j = self.index(name)
        return [row[j] for row in self.rows]

    def take(self, row_indices: Sequence[int]) -> "RawTable":
        return RawTable(list(self.column_names), [list(self.rows[i]) for i in row_indices])


def load_csv(path, delimiter: str = ",") -> RawTable:
    """Read a delimiter-separated UTF-8 file with a header row.

    Cells are kept as text; empty cells become ``None``. A row whose cell count
    differs from the header raises :class:`RaggedRowError` carrying the 0-based
    data-row index.
    """
    try:
        text = Path(path).read_text(encoding="utf-8-sig")
    except OSError as exc:
        raise TableError(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text), delimiter=delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise TableError(f"{path}: no header row") from None
    header = [h.strip() for h in header]
    rows = []
    for i, cells in enumerate(reader):
        if not cells:
            continue
        if len(cells) != len(header):
            raise RaggedRowError(i, len(header), len(cells))
        rows.append([c if c.strip() != "" else None for c in cells])
    return RawTable(header, rows)


@dataclass(frozen=True)
class ColumnSchema:
    name: str
    kind: str
    drop: bool = False
    key: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaMismatchError(f"column {self.name!r}: unknown kind {self.kind!r}")


@dataclass
class Schema:
    """Column declarations plus optional row filters (column -> allowed values)."""

    columns: list[ColumnSchema]
    filters: dict[str, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaMismatchError("schema declares a column twice")
        labels = [c for c in self.columns if c.kind == "label_personal"]
        if len(labels) != 1:
            raise SchemaMismatchError(
                f"schema needs exactly one label_personal column, found {len(labels)}"
            )
        if sum(c.key for c in self.columns) > 1:
            raise SchemaMismatchError("at most one key column allowed")

    def __iter__(self):
        return iter(self.columns)

    def __getitem__(self, name: str) -> ColumnSchema:
        for c in self.columns:
            if c.name == name:
                return c
        raise KeyError(name)

    def of_kind(self, *kinds: str) -> list[ColumnSchema]:
        return [c for c in self.columns if c.kind in kinds]

    @property
    def label(self) -> ColumnSchema:
        return self.of_kind("label_personal")[0]

    @property
    def key_column(self) -> ColumnSchema | None:
        return next((c for c in self.columns if c.key), None)

    @property
    def feature_columns(self) -> list[ColumnSchema]:
        return [c for c in self.columns if c.kind in FEATURE_KINDS and not c.drop]

    @property
    def categorical_columns(self) -> list[ColumnSchema]:
        return [c for c in self.feature_columns if c.kind == "categorical"]

    def kept(self, c: ColumnSchema) -> bool:
        return not c.drop or c.key


def parse_schema(text: str) -> Schema:
    """Parse the schema config.

    One column per line: ``<name> <kind> [drop] [key]``; names containing spaces
    are quoted. ``filter <name> in <v1>,<v2>,...`` keeps only rows whose value
    is listed. ``#`` starts a comment.
    """
    columns = []
    filters = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        tokens = shlex.split(line, comments=True)
        if not tokens:
            continue
        if tokens[0] == "filter":
            if len(tokens) != 4 or tokens[2] != "in":
                raise SchemaMismatchError(f"schema line {lineno}: expected 'filter <col> in <values>'")
            filters[tokens[1]] = frozenset(v.strip() for v in tokens[3].split(","))
            continue
        if len(tokens) < 2:
            raise SchemaMismatchError(f"schema line {lineno}: expected '<name> <kind> [drop] [key]'")
        flags = set(tokens[2:])
        unknown = flags - {"drop", "key"}
        if unknown:
            raise SchemaMismatchError(f"schema line {lineno}: unknown flags {sorted(unknown)}")
        columns.append(ColumnSchema(tokens[0], tokens[1], "drop" in flags, "key" in flags))
    schema = Schema(columns, filters)
    for name in filters:
        if name not in {c.name for c in columns}:
            raise SchemaMismatchError(f"filter on undeclared column {name!r}")
    return schema


def load_schema(path) -> Schema:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


def _to_float(cell) -> float | None:
    if cell is None:
        return None
    if isinstance(cell, (int, float)):
        value = float(cell)
    else:
        try:
            value = float(str(cell).strip())
        except ValueError:
            return None
    return value if math.isfinite(value) else None


def clean(raw: RawTable, schema: Schema, stats: dict | None = None) -> RawTable:
    """Drop unrelated columns and every row that cannot be used for training.

    Rows go when the personal-property label is missing or zero, when a filter
    rejects them, or when a numeric/geo cell is missing or unparseable. When
    ``stats`` is given it receives per-reason dropped-row counts.
    """
    declared = {c.name for c in schema}
    undeclared = [n for n in raw.column_names if n not in declared]
    if undeclared:
        raise SchemaMismatchError(f"columns missing from schema: {undeclared}")
    missing = [c.name for c in schema if schema.kept(c) and c.name not in raw.column_names]
    if missing:
        raise SchemaMismatchError(f"schema columns missing from table: {missing}")

    keep_cols = [c.name for c in schema if schema.kept(c) and c.name in raw.column_names]
    keep_idx = [raw.index(n) for n in keep_cols]
    label_j = raw.index(schema.label.name)
    numeric_j = [raw.index(c.name) for c in schema.of_kind("numeric", "latitude", "longitude")
                 if schema.kept(c)]
    filter_j = [(raw.index(n), allowed) for n, allowed in schema.filters.items()
                if n in raw.column_names]

    counts = Counter()
    rows = []
    for row in raw.rows:
        label = _to_float(row[label_j])
        if label is None or label == 0.0:
            counts["zero_or_missing_label"] += 1
            continue
        if any((row[j] or "").strip() not in allowed for j, allowed in filter_j):
            counts["filtered"] += 1
            continue
        if any(_to_float(row[j]) is None for j in numeric_j):
            counts["missing_numeric"] += 1
            continue
        rows.append([row[j] for j in keep_idx])
    if stats is not None:
        stats.update(counts)
        stats["kept"] = len(rows)
    if counts:
        logger.info("clean: kept %d of %d rows (%s)", len(rows), raw.row_count, dict(counts))
    return RawTable(keep_cols, rows)


@dataclass
class CategoricalEncoder:
    """Per-column level -> integer code maps, codes in first-occurrence order."""

    mappings: dict[str, dict[str, int]]
    unseen: Counter = field(default_factory=Counter)

    @staticmethod
    def _level(cell) -> str:
        return "" if cell is None else str(cell).strip()

    @classmethod
    def fit(cls, table: RawTable, columns: Sequence[str]) -> "CategoricalEncoder":
        mappings = {}
        for name in columns:
            codes: dict[str, int] = {}
            for cell in table.column(name):
                codes.setdefault(cls._level(cell), len(codes))
            mappings[name] = codes
        return cls(mappings)

    def transform(self, table: RawTable) -> RawTable:
        """Replace categorical cells with codes; unseen levels map to -1 and are counted."""
        cols = [(table.index(n), n, m) for n, m in self.mappings.items() if n in table.column_names]
        rows = []
        for row in table.rows:
            out = list(row)
            for j, name, mapping in cols:
                code = mapping.get(self._level(row[j]), -1)
                if code < 0:
                    self.unseen[name] += 1
                out[j] = code
            rows.append(out)
        total = sum(self.unseen.values())
        if total:
            logger.warning("categorical encoding: %d unseen level(s) mapped to -1", total)
        return RawTable(list(table.column_names), rows)

    def to_dict(self) -> dict:
        return {"mappings": self.mappings}

    @classmethod
    def from_dict(cls, d: dict) -> "CategoricalEncoder":
        return cls({k: dict(v) for k, v in d["mappings"].items()})


def encode_categoricals(table: RawTable, schema: Schema,
                        encoder: CategoricalEncoder | None = None):
    """Return ``(encoded_table, encoder)``; fits a new encoder on ``table`` when none is given."""
    if encoder is None:
        names = [c.name for c in schema.categorical_columns if c.name in table.column_names]
        encoder = CategoricalEncoder.fit(table, names)
    return encoder.transform(table), encoder


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @property
    def constant(self) -> np.ndarray:
        return self.std == 0.0

    def _safe_std(self) -> np.ndarray:
        return np.where(self.constant, 1.0, self.std)

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        X2 = X[:, None] if squeeze else X
        if X2.shape[1] != self.mean.shape[0]:
            raise ValueError(f"expected {self.mean.shape[0]} columns, got {X2.shape[1]}")
        out = (X2 - self.mean) / self._safe_std()
        out[:, self.constant] = 0.0
        return out[:, 0] if squeeze else out

    def invert(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64)
        squeeze = Z.ndim == 1
        Z2 = Z[:, None] if squeeze else Z
        if Z2.shape[1] != self.mean.shape[0]:
            raise ValueError(f"expected {self.mean.shape[0]} columns, got {Z2.shape[1]}")
        out = Z2 * self.std + self.mean
        return out[:, 0] if squeeze else out

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalizer(X) -> Normalizer:
    """Per-column mean and population std. A 1-d input is treated as one column."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] == 0:
        raise ValueError("cannot fit a normalizer on an empty matrix")
    if not np.all(np.isfinite(X)):
        raise ValueError("normalizer input contains non-finite values")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    # exact-constant columns can still produce ~1e-17 std from rounding
    std[np.all(X == X[0], axis=0)] = 0.0
    return Normalizer(mean, std)


def apply_normalizer(norm: Normalizer, X) -> np.ndarray:
    return norm.apply(X)


@dataclass
class FeatureMatrix:
    ids: list[str]
    X: np.ndarray
    y: np.ndarray
    lat: np.ndarray
    lon: np.ndarray

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.lat = np.asarray(self.lat, dtype=np.float64)
        self.lon = np.asarray(self.lon, dtype=np.float64)
        n = len(self.ids)
        if self.X.ndim != 2 or self.X.shape[0] != n or self.y.shape != (n,):
            raise ValueError("ids, X and y disagree on row count")
        if self.lat.shape != (n,) or self.lon.shape != (n,):
            raise ValueError("lat/lon length mismatch")
        if len(set(self.ids)) != n:
            raise ValueError("duplicate ids in feature matrix")
        for name in ("X", "y", "lat", "lon"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if np.any(np.abs(self.lat) > 90) or np.any(np.abs(self.lon) > 180):
            raise ValueError("latitude/longitude out of range")

    @property
    def n(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureMatrix([self.ids[i] for i in idx], self.X[idx], self.y[idx],
                             self.lat[idx], self.lon[idx])


def split_sizes(n: int, fractions=DEFAULT_FRACTIONS) -> tuple[int, int, int]:
    """Partition sizes: validation and test take ``ceil(n * f)``, train the rest."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three values summing to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative")
    n_val = math.ceil(n * fractions[1] - 1e-9)
    n_test = math.ceil(n * fractions[2] - 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"split of {n} rows by {fractions} leaves an empty partition")
    return n_train, n_val, n_test


def split_indices(n: int, seed: int, fractions=DEFAULT_FRACTIONS):
    n_train, n_val, _ = split_sizes(n, fractions)
    order = np.random.default_rng(seed).permutation(n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def split(fm: FeatureMatrix, seed: int, fractions=DEFAULT_FRACTIONS):
    """Seeded shuffle, then contiguous train/validation/test blocks."""
    return tuple(fm.take(idx) for idx in split_indices(fm.n, seed, fractions))


@dataclass
class Preprocessed:
    train: FeatureMatrix
    val: FeatureMatrix
    test: FeatureMatrix
    feature_names: list[str]
    encoder: CategoricalEncoder
    feature_norm: Normalizer
    label_norm: Normalizer

    def metadata(self) -> dict:
        return {
            "feature_names": self.feature_names,
            "categorical": self.encoder.to_dict(),
            "feature_norm": self.feature_norm.to_dict(),
            "label_norm": self.label_norm.to_dict(),
            "unseen_levels": dict(self.encoder.unseen),
            "sizes": {"train": self.train.n, "val": self.val.n, "test": self.test.n},
        }


def _numeric_block(table: RawTable, names: Sequence[str]) -> np.ndarray:
    out = np.empty((table.row_count, len(names)), dtype=np.float64)
    for k, name in enumerate(names):
        j = table.index(name)
        for i, row in enumerate(table.rows):
            v = _to_float(row[j])
            out[i, k] = np.nan if v is None else v
    return out


def preprocess(table: RawTable, schema: Schema, seed: int = 0,
               fractions=DEFAULT_FRACTIONS) -> Preprocessed:
    """Split a cleaned table and produce normalized train/val/test feature matrices."""
    feature_names = [c.name for c in schema.feature_columns]
    lat_cols = schema.of_kind("latitude")
    lon_cols = schema.of_kind("longitude")
    if len(lat_cols) != 1 or len(lon_cols) != 1:
        raise SchemaMismatchError("schema needs exactly one latitude and one longitude column")
    key = schema.key_column
    ids = ([str(v).strip() for v in table.column(key.name)] if key
           else [str(i) for i in range(table.row_count)])
    if len(set(ids)) != len(ids):
        raise TableError("record keys are not unique")

    parts = split_indices(table.row_count, seed, fractions)
    train_raw = table.take(parts[0])
    _, encoder = encode_categoricals(train_raw, schema)

    def block(idx):
        sub, _ = encode_categoricals(table.take(idx), schema, encoder)
        return (_numeric_block(sub, feature_names),
                _numeric_block(sub, [schema.label.name])[:, 0],
                _numeric_block(sub, [lat_cols[0].name])[:, 0],
                _numeric_block(sub, [lon_cols[0].name])[:, 0])

    blocks = [block(idx) for idx in parts]
    feature_norm = fit_normalizer(blocks[0][0])
    label_norm = fit_normalizer(blocks[0][1])
    mats = []
    for idx, (X, y, lat, lon) in zip(parts, blocks):
        mats.append(FeatureMatrix([ids[i] for i in idx], feature_norm.apply(X),
                                  label_norm.apply(y), lat, lon))
    return Preprocessed(*mats, feature_names, encoder, feature_norm, label_norm)


def write_feature_matrix(fm: FeatureMatrix, path) -> None:
    """Binary layout: magic, u16 version, u64 n, u64 d, ids (u32 length + UTF-8),
    X row-major f64, y f64, lat f64, lon f64; all little-endian."""
    n, d = fm.X.shape
    with open(path, "wb") as f:
        f.write(FM_MAGIC)
        f.write(struct.pack("<HQQ", FM_VERSION, n, d))
        for rid in fm.ids:
            raw = rid.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
        for arr in (fm.X, fm.y, fm.lat, fm.lon):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_feature_matrix(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if data[:4] != FM_MAGIC:
        raise ValueError(f"{path}: not a feature-matrix file")
    version, n, d = struct.unpack_from("<HQQ", data, 4)
    if version != FM_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 4 + struct.calcsize("<HQQ")
    ids = []
    for _ in range(n):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        ids.append(data[pos:pos + length].decode("utf-8"))
        pos += length

    def floats(count):
        nonlocal pos
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64)
        pos += 8 * count
        return arr

    X = floats(n * d).reshape(n, d)
    y, lat, lon = floats(n), floats(n), floats(n)
    return FeatureMatrix(ids, X, y, lat, lon)
