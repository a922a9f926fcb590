"""Dataset schema, CSV ingestion, min-max normalization, and one-hot encoding.

All other modules consume data through the types defined here. Tables are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REAL = "real"
CATEGORICAL = "categorical"
LABEL_COLUMN = "label"
ANOMALY = 1
INLIER = 0


class DataError(ValueError):
    """Malformed dataset, schema, or row."""


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str
    values: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise DataError("feature name must be non-empty")
        if self.kind not in (REAL, CATEGORICAL):
            raise DataError(f"unknown feature kind {self.kind!r}")
        if self.kind == CATEGORICAL and len(self.values) < 1:
            raise DataError(f"categorical feature {self.name!r} declares no values")
        if self.kind == REAL and self.values:
            raise DataError(f"real feature {self.name!r} must not declare values")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature declarations; the i-th slot of every point follows it."""

    features: tuple[Feature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise DataError("feature names must be unique")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def n_features(self) -> int:
        return len(self.features)

    def index_of(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise DataError(f"unknown feature {name!r}")

    def feature(self, name: str) -> Feature:
        return self.features[self.index_of(name)]

    def real_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.kind == REAL]

    def categorical_indices(self) -> list[int]:
        return [i for i, f in enumerate(self.features) if f.kind == CATEGORICAL]

    def to_json(self) -> dict:
        return {
            "features": [
                {"name": f.name, "kind": f.kind, **({"values": list(f.values)} if f.kind == CATEGORICAL else {})}
                for f in self.features
            ]
        }

    @staticmethod
    def from_json(doc: dict) -> "FeatureSchema":
        feats = []
        for spec in doc["features"]:
            kind = spec["kind"]
            feats.append(Feature(spec["name"], kind, tuple(spec.get("values", ())) if kind == CATEGORICAL else ()))
        return FeatureSchema(tuple(feats))


@dataclass(frozen=True)
class Point:
    """One row; values positionally aligned with the schema."""

    values: tuple

    def __getitem__(self, i: int):
        return self.values[i]

    def __len__(self) -> int:
        return len(self.values)


def _check_row(schema: FeatureSchema, values: tuple, row: int | None = None) -> None:
    where = "" if row is None else f" at row {row}"
    if len(values) != schema.n_features:
        raise DataError(f"row length {len(values)} != schema length {schema.n_features}{where}")
    for f, v in zip(schema.features, values):
        if f.kind == REAL:
            if not isinstance(v, float) or not np.isfinite(v):
                raise DataError(f"feature {f.name!r}{where}: expected finite real, got {v!r}")
        else:
            if v not in f.values:
                raise DataError(f"feature {f.name!r}{where}: value {v!r} not in declared categories")


@dataclass(frozen=True)
class DatasetTable:
    """Schema-conforming rows plus optional inlier/anomaly labels (1 = anomaly)."""

    schema: FeatureSchema
    rows: tuple[Point, ...]
    labels: tuple[int, ...] | None = None

    def __post_init__(self):
        for i, p in enumerate(self.rows):
            _check_row(self.schema, p.values, row=i)
        if self.labels is not None and len(self.labels) != len(self.rows):
            raise DataError(f"{len(self.labels)} labels for {len(self.rows)} rows")

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def real_matrix(self) -> np.ndarray:
        """Real-feature columns as a float array of shape (n_rows, n_real)."""
        idx = self.schema.real_indices()
        out = np.empty((self.n_rows, len(idx)))
        for j, i in enumerate(idx):
            out[:, j] = [p.values[i] for p in self.rows]
        return out

    def column(self, name: str) -> list:
        i = self.schema.index_of(name)
        return [p.values[i] for p in self.rows]

    def subset(self, indices) -> "DatasetTable":
        rows = tuple(self.rows[i] for i in indices)
        labels = None if self.labels is None else tuple(self.labels[i] for i in indices)
        return DatasetTable(self.schema, rows, labels)


def select_features(data: DatasetTable, names: list[str]) -> DatasetTable:
    """Project a table onto a subset of its features, keeping labels."""
    idx = [data.schema.index_of(n) for n in names]
    schema = FeatureSchema(tuple(data.schema.features[i] for i in idx))
    rows = tuple(Point(tuple(p.values[i] for i in idx)) for p in data.rows)
    return DatasetTable(schema, rows, data.labels)


@dataclass(frozen=True)
class NormalizationState:
    """Observed (min, max) per real feature, fitted once on the fit set."""

    ranges: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        for name, lo, hi in self.ranges:
            if lo > hi:
                raise DataError(f"feature {name!r}: min {lo} > max {hi}")

    def range_of(self, name: str) -> tuple[float, float]:
        for n, lo, hi in self.ranges:
            if n == name:
                return lo, hi
        raise DataError(f"feature {name!r} has no fitted range")


def fit_normalizer(data: DatasetTable) -> NormalizationState:
    """Record per-real-feature min/max over all rows of the fit set."""
    if data.n_rows == 0:
        raise DataError("cannot fit a normalizer on an empty dataset")
    ranges = []
    for i in data.schema.real_indices():
        col = [p.values[i] for p in data.rows]
        ranges.append((data.schema.features[i].name, float(min(col)), float(max(col))))
    return NormalizationState(tuple(ranges))


def normalize(point: Point, schema: FeatureSchema, state: NormalizationState) -> Point:
    """Map each real value v to (v - min) / (max - min); constant ranges map to 0.

    Values outside the fitted range map outside [0, 1]; no clamping.
    Categorical values pass through unchanged.
    """
    out = list(point.values)
    for i in schema.real_indices():
        lo, hi = state.range_of(schema.features[i].name)
        out[i] = 0.0 if hi == lo else (point.values[i] - lo) / (hi - lo)
    return Point(tuple(out))


def denormalize(point: Point, schema: FeatureSchema, state: NormalizationState) -> Point:
    out = list(point.values)
    for i in schema.real_indices():
        lo, hi = state.range_of(schema.features[i].name)
        out[i] = lo if hi == lo else lo + point.values[i] * (hi - lo)
    return Point(tuple(out))


def normalized_real_matrix(data: DatasetTable, state: NormalizationState) -> np.ndarray:
    """Vectorized normalize() over the real columns of a table."""
    idx = data.schema.real_indices()
    mat = data.real_matrix()
    for j, i in enumerate(idx):
        lo, hi = state.range_of(data.schema.features[i].name)
        mat[:, j] = 0.0 if hi == lo else (mat[:, j] - lo) / (hi - lo)
    return mat


# -- one-hot encoding ------------------------------------------------------
#
# Shared by the no-projection detector mode and the generative simulator:
# real features become single min-max-normalized columns, categorical
# features expand to one indicator column per declared value.


@dataclass(frozen=True)
class OneHotLayout:
    columns: tuple[str, ...]
    feature_of: tuple[int, ...]

    @property
    def width(self) -> int:
        return len(self.columns)

    def blocks(self) -> dict[int, list[int]]:
        """Column indices grouped by originating schema feature index."""
        out: dict[int, list[int]] = {}
        for col, fi in enumerate(self.feature_of):
            out.setdefault(fi, []).append(col)
        return out


def build_layout(schema: FeatureSchema) -> OneHotLayout:
    cols: list[str] = []
    feat_of: list[int] = []
    for i, f in enumerate(schema.features):
        if f.kind == REAL:
            cols.append(f.name)
            feat_of.append(i)
        else:
            for v in f.values:
                cols.append(f"{f.name}={v}")
                feat_of.append(i)
    return OneHotLayout(tuple(cols), tuple(feat_of))


def encode_point(point: Point, schema: FeatureSchema, state: NormalizationState, layout: OneHotLayout) -> np.ndarray:
    out = np.zeros(layout.width)
    col = 0
    for i, f in enumerate(schema.features):
        if f.kind == REAL:
            lo, hi = state.range_of(f.name)
            out[col] = 0.0 if hi == lo else (point.values[i] - lo) / (hi - lo)
            col += 1
        else:
            off = f.values.index(point.values[i])
            out[col + off] = 1.0
            col += len(f.values)
    return out


def encode_table(data: DatasetTable, state: NormalizationState, layout: OneHotLayout) -> np.ndarray:
    out = np.zeros((data.n_rows, layout.width))
    for r, p in enumerate(data.rows):
        out[r] = encode_point(p, data.schema, state, layout)
    return out


def decode_vector(vec: np.ndarray, schema: FeatureSchema, state: NormalizationState, layout: OneHotLayout) -> Point:
    """Inverse of encode_point; categorical blocks decode by arg-max."""
    values: list = []
    col = 0
    for f in schema.features:
        if f.kind == REAL:
            lo, hi = state.range_of(f.name)
            values.append(float(lo if hi == lo else lo + vec[col] * (hi - lo)))
            col += 1
        else:
            block = vec[col : col + len(f.values)]
            values.append(f.values[int(np.argmax(block))])
            col += len(f.values)
    return Point(tuple(values))


# -- CSV + JSON-sidecar ingestion ------------------------------------------


def load_schema(schema_path: str | Path) -> FeatureSchema:
    path = Path(schema_path)
    if not path.exists():
        raise DataError(f"schema file not found: {path}")
    return FeatureSchema.from_json(json.loads(path.read_text(encoding="utf-8")))


def load_csv(path: str | Path, schema_path: str | Path, drop_constant: bool = True) -> DatasetTable:
    """Parse an RFC-4180 CSV against its JSON schema sidecar.

    The header must list the schema's feature names in order; a trailing
    ``label`` column (0/1) populates labels. Rows with missing values are
    rejected, and features observed with a single distinct value are dropped
    with a warning.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    schema = load_schema(schema_path)

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        has_label = bool(header) and header[-1] == LABEL_COLUMN
        feature_header = header[:-1] if has_label else header
        if tuple(feature_header) != schema.names:
            raise DataError(
                f"{path}: header {feature_header!r} does not match schema features {list(schema.names)!r}"
            )

        rows: list[Point] = []
        labels: list[int] = []
        for r, cells in enumerate(reader):
            if len(cells) != len(header):
                raise DataError(f"{path}: row {r} has {len(cells)} cells, expected {len(header)}")
            values: list = []
            for f, cell in zip(schema.features, cells):
                if cell == "":
                    raise DataError(f"{path}: row {r}, feature {f.name!r}: missing value")
                if f.kind == REAL:
                    try:
                        v = float(cell)
                    except ValueError:
                        raise DataError(f"{path}: row {r}, feature {f.name!r}: unparseable number {cell!r}") from None
                    if not np.isfinite(v):
                        raise DataError(f"{path}: row {r}, feature {f.name!r}: non-finite value {cell!r}")
                    values.append(v)
                else:
                    if cell not in f.values:
                        raise DataError(f"{path}: row {r}, feature {f.name!r}: value {cell!r} not in schema")
                    values.append(cell)
            rows.append(Point(tuple(values)))
            if has_label:
                if cells[-1] not in ("0", "1"):
                    raise DataError(f"{path}: row {r}: label must be 0 or 1, got {cells[-1]!r}")
                labels.append(int(cells[-1]))

    if drop_constant and rows:
        keep = []
        for i, f in enumerate(schema.features):
            distinct = {p.values[i] for p in rows}
            if len(distinct) <= 1:
                warnings.warn(f"dropping constant feature {f.name!r}", stacklevel=2)
            else:
                keep.append(i)
        if len(keep) < schema.n_features:
            if not keep:
                raise DataError(f"{path}: every feature is constant")
            schema = FeatureSchema(tuple(schema.features[i] for i in keep))
            rows = [Point(tuple(p.values[i] for i in keep)) for p in rows]

    return DatasetTable(schema, tuple(rows), tuple(labels) if has_label else None)


def _format_cell(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def save_csv(data: DatasetTable, path: str | Path, schema_path: str | Path) -> None:
    """Write the CSV + sidecar pair; load_csv on the output round-trips."""
    path, schema_path = Path(path), Path(schema_path)
    schema_path.write_text(json.dumps(data.schema.to_json(), indent=2) + "\n", encoding="utf-8")
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(data.schema.names) + ([LABEL_COLUMN] if data.labels is not None else [])
        writer.writerow(header)
        for r, p in enumerate(data.rows):
            cells = [_format_cell(v) for v in p.values]
            if data.labels is not None:
                cells.append(str(data.labels[r]))
            writer.writerow(cells)


def dataset_fingerprint(data: DatasetTable) -> str:
    """Stable content hash binding rule scores to the dataset they used."""
    h = hashlib.sha256()
    h.update(json.dumps(data.schema.to_json(), sort_keys=True).encode())
    for r, p in enumerate(data.rows):
        h.update(("|".join(_format_cell(v) for v in p.values)).encode())
        h.update(b"\n")
    if data.labels is not None:
        h.update(bytes(data.labels))
    return h.hexdigest()[:16]
