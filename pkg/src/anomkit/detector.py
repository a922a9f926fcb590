"""Half-space-chain density ensemble over hashed sparse random projections.

A fitted ensemble holds M chains of depth L sharing one bin-width vector.
Each chain recursively halves a feature space (the K hashed projection
dimensions, or the one-hot encoded dimensions in no-projection mode) on
features sampled with replacement, counting fit points per bin at every
level. A point's chain score is the minimum level-extrapolated bin count;
lower final scores mean more anomalous.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataio import (
    CATEGORICAL,
    REAL,
    DatasetTable,
    FeatureSchema,
    NormalizationState,
    OneHotLayout,
    Point,
    build_layout,
    encode_point,
    encode_table,
    fit_normalizer,
    normalize,
    normalized_real_matrix,
)

PROJECTED = "projected"
ONE_HOT = "one-hot"

# below this the projected range is treated as degenerate and the bin
# width floored, keeping the dimension inert instead of dividing by zero
DELTA_FLOOR = 1e-9

_TOKEN_SEP = "\x1f"
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class NotFittedError(RuntimeError):
    pass


# -- hashed sparse random vectors --------------------------------------------


class HashFamily:
    """K seeded string hashes, each mapping to {+1, -1, 0} with probability
    1/6, 1/6, 2/3 — the entries of the sparse projection vectors, computed
    on demand instead of materialized."""

    def __init__(self, n_dims: int, master_seed: int):
        if n_dims < 1:
            raise ValueError("need at least one projection dimension")
        self.n_dims = n_dims
        self.master_seed = int(master_seed)
        self._key = hashlib.blake2b(
            self.master_seed.to_bytes(8, "little", signed=True), digest_size=16
        ).digest()
        self._cache: dict[str, np.ndarray] = {}

    def value(self, k: int, token: str) -> int:
        digest = hashlib.blake2b(
            k.to_bytes(4, "little") + token.encode("utf-8"), key=self._key, digest_size=8
        ).digest()
        r = int.from_bytes(digest, "little") % 6
        return 1 if r == 0 else (-1 if r == 1 else 0)

    def vector(self, token: str) -> np.ndarray:
        """All K hash values for one token; cached per token."""
        vec = self._cache.get(token)
        if vec is None:
            vec = np.array([self.value(k, token) for k in range(self.n_dims)], dtype=np.float64)
            vec.setflags(write=False)
            self._cache[token] = vec
        return vec

    @staticmethod
    def categorical_token(name: str, value: str) -> str:
        return name + _TOKEN_SEP + value


def project(point: Point, hashes: HashFamily, schema: FeatureSchema) -> np.ndarray:
    """Sketch of an already-normalized point.

    Each sketch entry k sums h_k(name) * value over real features plus
    h_k(name ++ value) over categorical features.
    """
    sketch = np.zeros(hashes.n_dims)
    for i, f in enumerate(schema.features):
        if f.kind == REAL:
            sketch += hashes.vector(f.name) * point.values[i]
        else:
            sketch += hashes.vector(HashFamily.categorical_token(f.name, point.values[i]))
    return sketch


def _project_table(
    data: DatasetTable, state: NormalizationState, hashes: HashFamily
) -> np.ndarray:
    schema = data.schema
    sketches = np.zeros((data.n_rows, hashes.n_dims))
    real_idx = schema.real_indices()
    if real_idx:
        reals = normalized_real_matrix(data, state)
        rmat = np.stack([hashes.vector(schema.features[i].name) for i in real_idx])
        sketches += reals @ rmat
    for i in schema.categorical_indices():
        f = schema.features[i]
        vecs = np.stack([hashes.vector(HashFamily.categorical_token(f.name, v)) for v in f.values])
        codes = np.array([f.values.index(p.values[i]) for p in data.rows])
        sketches += vecs[codes]
    return sketches


# -- per-level counting structures --------------------------------------------


def _row_keys(rows: np.ndarray) -> np.ndarray:
    """View int64 rows as fixed-width void scalars usable as dict keys."""
    rows = np.ascontiguousarray(rows, dtype=np.int64)
    if rows.ndim == 1:
        rows = rows[None, :]
    return rows.view(np.dtype((np.void, rows.dtype.itemsize * rows.shape[1]))).ravel()


def _mix64(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def _hash_rows(rows: np.ndarray, seed: int) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.int64))
    h = np.full(rows.shape[0], np.uint64(seed) ^ _GOLDEN, dtype=np.uint64)
    for j in range(rows.shape[1]):
        salt = np.uint64((int(_GOLDEN) * (j + 1)) & 0xFFFFFFFFFFFFFFFF)
        h = _mix64(h ^ (rows[:, j].astype(np.uint64) + salt))
    return h


class ExactCounter:
    """Exact multiplicity of every bin-id seen during fit."""

    kind = "exact"

    def __init__(self, counts: dict[bytes, int] | None = None):
        self.counts = counts if counts is not None else {}

    def insert_rows(self, rows: np.ndarray) -> None:
        keys, counts = np.unique(_row_keys(rows), return_counts=True)
        for key, n in zip(keys, counts):
            kb = key.tobytes()
            self.counts[kb] = self.counts.get(kb, 0) + int(n)

    def count_rows(self, rows: np.ndarray) -> np.ndarray:
        get = self.counts.get
        return np.fromiter((get(k.tobytes(), 0) for k in _row_keys(rows)), dtype=np.int64)

    def count(self, bin_id) -> int:
        return int(self.count_rows(np.asarray(bin_id, dtype=np.int64))[0])

    def total(self) -> int:
        return sum(self.counts.values())

    def to_json(self) -> dict:
        width = len(next(iter(self.counts))) // 8 if self.counts else 0
        bins = {}
        for kb, n in self.counts.items():
            coords = np.frombuffer(kb, dtype=np.int64)
            bins[",".join(str(int(c)) for c in coords)] = n
        return {"type": self.kind, "width": width, "bins": bins}

    @staticmethod
    def from_json(doc: dict) -> "ExactCounter":
        counts = {}
        for key, n in doc["bins"].items():
            coords = np.array([int(t) for t in key.split(",")], dtype=np.int64)
            counts[coords.tobytes()] = int(n)
        return ExactCounter(counts)


class CountMinSketch:
    """Fixed-size approximate counter; estimates never fall below the truth."""

    kind = "cms"

    def __init__(self, rows: int, cols: int, seed: int, table: np.ndarray | None = None):
        if rows < 1 or cols < 1:
            raise ValueError("count-min sketch needs at least one row and column")
        self.rows = rows
        self.cols = cols
        self.seed = int(seed)
        self.table = np.zeros((rows, cols), dtype=np.int64) if table is None else table
        rng = np.random.default_rng(self.seed)
        self._row_salt = rng.integers(1, np.iinfo(np.int64).max, size=rows, dtype=np.int64).astype(np.uint64)

    def _cells(self, hashes: np.ndarray) -> np.ndarray:
        cells = np.empty((self.rows, hashes.shape[0]), dtype=np.int64)
        for j in range(self.rows):
            cells[j] = (_mix64(hashes ^ self._row_salt[j]) % np.uint64(self.cols)).astype(np.int64)
        return cells

    def insert_rows(self, rows: np.ndarray) -> None:
        cells = self._cells(_hash_rows(rows, self.seed))
        for j in range(self.rows):
            np.add.at(self.table[j], cells[j], 1)

    def count_rows(self, rows: np.ndarray) -> np.ndarray:
        cells = self._cells(_hash_rows(rows, self.seed))
        est = self.table[0, cells[0]]
        for j in range(1, self.rows):
            est = np.minimum(est, self.table[j, cells[j]])
        return est

    def count(self, bin_id) -> int:
        return int(self.count_rows(np.asarray(bin_id, dtype=np.int64))[0])

    def to_json(self) -> dict:
        return {
            "type": self.kind,
            "rows": self.rows,
            "cols": self.cols,
            "seed": self.seed,
            "table": self.table.tolist(),
        }

    @staticmethod
    def from_json(doc: dict) -> "CountMinSketch":
        return CountMinSketch(
            doc["rows"], doc["cols"], doc["seed"], table=np.array(doc["table"], dtype=np.int64)
        )


def cms_count(counter: CountMinSketch, bin_id) -> int:
    """Approximate count of a bin-id: minimum over the sketch's hashed cells."""
    return counter.count(bin_id)


def _counter_from_json(doc: dict):
    if doc["type"] == "exact":
        return ExactCounter.from_json(doc)
    if doc["type"] == "cms":
        return CountMinSketch.from_json(doc)
    raise ValueError(f"unknown counter type {doc['type']!r}")


# -- chains -------------------------------------------------------------------


@dataclass
class HalfSpaceChain:
    """Depth-L halving sequence with one counting structure per level."""

    features: np.ndarray          # (L,) dimension index sampled at each level
    counters: list                # L counters

    def __post_init__(self):
        # o(f, l) - 1 exponent per level, plus the canonical key layout:
        # for each level, the distinct dims sampled so far (ascending) and
        # the level column holding each dim's most recent bin coordinate.
        occ: dict[int, int] = {}
        last: dict[int, int] = {}
        self._mults = np.empty(len(self.features))
        self._key_cols: list[list[int]] = []
        self._key_dims: list[list[int]] = []
        for l, f in enumerate(self.features):
            f = int(f)
            occ[f] = occ.get(f, 0) + 1
            last[f] = l
            self._mults[l] = 2.0 ** (occ[f] - 1)
            dims = sorted(last)
            self._key_dims.append(dims)
            self._key_cols.append([last[d] for d in dims])

    @property
    def depth(self) -> int:
        return len(self.features)

    def coord_matrix(self, sketches: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """Per-level bin coordinate of every sketch, shape (n, L).

        Level l's coordinate is floor(s[f_l] * 2^(o-1) / delta[f_l]) where o
        counts prior samples of f_l in the chain; the doubling form of the
        incremental update and this closed form agree exactly in binary
        floating point.
        """
        n = sketches.shape[0]
        coords = np.empty((n, self.depth), dtype=np.int64)
        for l, f in enumerate(self.features):
            coords[:, l] = np.floor(sketches[:, int(f)] * self._mults[l] / delta[int(f)]).astype(np.int64)
        return coords

    def key_rows(self, coords: np.ndarray, level: int) -> np.ndarray:
        """Canonical bin-id at a 0-based level: most recent coordinate of each
        distinct sampled dimension, in ascending dimension order."""
        return coords[:, self._key_cols[level]]

    def insert(self, coords: np.ndarray) -> None:
        for l in range(self.depth):
            self.counters[l].insert_rows(self.key_rows(coords, l))

    def level_counts(self, coords: np.ndarray) -> np.ndarray:
        n = coords.shape[0]
        counts = np.empty((n, self.depth), dtype=np.int64)
        for l in range(self.depth):
            counts[:, l] = self.counters[l].count_rows(self.key_rows(coords, l))
        return counts


def bin_id_path(sketch: np.ndarray, chain: HalfSpaceChain, delta: np.ndarray) -> list[dict[int, int]]:
    """Bin identifiers of a sketch at every chain level.

    Returns one mapping of dimension -> integer bin per level; dimensions
    not yet sampled are implicitly bin 0. Computed with the incremental
    update: a dimension's scaled value starts at s[f]/delta[f] on first
    sampling and doubles on every repeat before flooring.
    """
    z: dict[int, float] = {}
    path: list[dict[int, int]] = []
    for f in chain.features:
        f = int(f)
        if f in z:
            z[f] = 2.0 * z[f]
        else:
            z[f] = float(sketch[f]) / float(delta[f])
        path.append({d: int(np.floor(v)) for d, v in z.items()})
    return path


# -- ensemble -----------------------------------------------------------------


@dataclass(frozen=True)
class DetectorParams:
    """Fit configuration. projection_dims=None fits directly on the one-hot
    encoded dimensions (no-projection mode)."""

    n_chains: int = 200
    depth: int = 20
    projection_dims: int | None = None
    counter: str = "exact"
    cms_rows: int = 3
    cms_cols: int = 50
    seed: int = 0

    def to_json(self) -> dict:
        return {
            "n_chains": self.n_chains,
            "depth": self.depth,
            "projection_dims": self.projection_dims,
            "counter": self.counter,
            "cms_rows": self.cms_rows,
            "cms_cols": self.cms_cols,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(doc: dict) -> "DetectorParams":
        return DetectorParams(**doc)


@dataclass(frozen=True)
class ScoreReport:
    """Per-point scoring outcome.

    final_score is the arithmetic mean of the per-chain scores; chain_levels
    holds each chain's 1-indexed scoring level (the argmin of the level-
    extrapolated counts, ties resolved toward the coarsest level). paths is
    populated by score() for single points and omitted in bulk scoring.
    """

    final_score: float
    chain_scores: np.ndarray
    chain_levels: np.ndarray
    paths: tuple | None = None


@dataclass
class ChainEnsemble:
    params: DetectorParams
    schema: FeatureSchema
    normalizer: NormalizationState
    mode: str                         # PROJECTED or ONE_HOT
    dims: int                         # K, or the one-hot width
    delta: np.ndarray
    chains: list[HalfSpaceChain]
    n_fit: int
    hashes: HashFamily | None = None
    layout: OneHotLayout | None = None

    def embed_table(self, data: DatasetTable) -> np.ndarray:
        if self.mode == PROJECTED:
            return _project_table(data, self.normalizer, self.hashes)
        return encode_table(data, self.normalizer, self.layout)

    def embed_point(self, point: Point) -> np.ndarray:
        if self.mode == PROJECTED:
            return project(normalize(point, self.schema, self.normalizer), self.hashes, self.schema)
        return encode_point(point, self.schema, self.normalizer, self.layout)


def fit(data: DatasetTable, params: DetectorParams) -> ChainEnsemble:
    """Fit the chain ensemble on a dataset (batch: fit once, score after).

    Bin widths are half the per-dimension range of the embedded fit data;
    every fit point is inserted into all levels of every chain.
    """
    if data.n_rows == 0:
        raise ValueError("cannot fit on an empty dataset")
    if params.n_chains < 1 or params.depth < 1:
        raise ValueError("need n_chains >= 1 and depth >= 1")

    normalizer = fit_normalizer(data)
    if params.projection_dims is not None:
        hashes = HashFamily(params.projection_dims, params.seed)
        layout = None
        mode = PROJECTED
        embedded = _project_table(data, normalizer, hashes)
    else:
        hashes = None
        layout = build_layout(data.schema)
        mode = ONE_HOT
        embedded = encode_table(data, normalizer, layout)

    dims = embedded.shape[1]
    delta = (embedded.max(axis=0) - embedded.min(axis=0)) / 2.0
    delta[delta <= 0.0] = DELTA_FLOOR

    rng = np.random.default_rng(params.seed)
    chains = []
    for m in range(params.n_chains):
        features = rng.integers(0, dims, size=params.depth)
        counters: list = []
        for l in range(params.depth):
            if params.counter == "cms":
                counters.append(CountMinSketch(params.cms_rows, params.cms_cols, seed=params.seed * 1_000_003 + m * 1_009 + l))
            elif params.counter == "exact":
                counters.append(ExactCounter())
            else:
                raise ValueError(f"unknown counter mode {params.counter!r}")
        chain = HalfSpaceChain(features, counters)
        chain.insert(chain.coord_matrix(embedded, delta))
        chains.append(chain)

    return ChainEnsemble(
        params=params,
        schema=data.schema,
        normalizer=normalizer,
        mode=mode,
        dims=dims,
        delta=delta,
        chains=chains,
        n_fit=data.n_rows,
        hashes=hashes,
        layout=layout,
    )


def _score_embedded(ensemble: ChainEnsemble, embedded: np.ndarray):
    n = embedded.shape[0]
    m = len(ensemble.chains)
    depth = ensemble.params.depth
    extrapolation = 2.0 ** np.arange(1, depth + 1)
    chain_scores = np.empty((n, m))
    chain_levels = np.empty((n, m), dtype=np.int64)
    for j, chain in enumerate(ensemble.chains):
        coords = chain.coord_matrix(embedded, ensemble.delta)
        counts = chain.level_counts(coords)
        extrapolated = counts * extrapolation
        levels = np.argmin(extrapolated, axis=1)      # first minimum = coarsest level
        chain_levels[:, j] = levels + 1
        chain_scores[:, j] = extrapolated[np.arange(n), levels]
    return chain_scores, chain_levels


def score_batch(data: DatasetTable, ensemble: ChainEnsemble) -> list[ScoreReport]:
    """Score every row; order preserved. Equivalent to mapping score()."""
    if data.n_rows == 0:
        return []
    embedded = ensemble.embed_table(data)
    chain_scores, chain_levels = _score_embedded(ensemble, embedded)
    final = chain_scores.mean(axis=1)
    return [
        ScoreReport(float(final[i]), chain_scores[i].copy(), chain_levels[i].copy())
        for i in range(data.n_rows)
    ]


def score(point: Point, ensemble: ChainEnsemble) -> ScoreReport:
    """Score one point, including its full per-chain bin-id paths."""
    embedded = ensemble.embed_point(point)[None, :]
    chain_scores, chain_levels = _score_embedded(ensemble, embedded)
    paths = tuple(
        tuple(bin_id_path(embedded[0], chain, ensemble.delta)) for chain in ensemble.chains
    )
    return ScoreReport(float(chain_scores[0].mean()), chain_scores[0], chain_levels[0], paths)


def final_scores(reports: list[ScoreReport]) -> np.ndarray:
    return np.array([r.final_score for r in reports])


# -- serialization --------------------------------------------------------------


def ensemble_to_json(ensemble: ChainEnsemble) -> dict:
    return {
        "params": ensemble.params.to_json(),
        "mode": ensemble.mode,
        "dims": ensemble.dims,
        "n_fit": ensemble.n_fit,
        "schema": ensemble.schema.to_json(),
        "normalizer": [[n, lo, hi] for n, lo, hi in ensemble.normalizer.ranges],
        "delta": ensemble.delta.tolist(),
        "chains": [
            {
                "features": [int(f) for f in chain.features],
                "counters": [c.to_json() for c in chain.counters],
            }
            for chain in ensemble.chains
        ],
    }


def ensemble_from_json(doc: dict) -> ChainEnsemble:
    params = DetectorParams.from_json(doc["params"])
    schema = FeatureSchema.from_json(doc["schema"])
    normalizer = NormalizationState(tuple((n, float(lo), float(hi)) for n, lo, hi in doc["normalizer"]))
    chains = []
    for cdoc in doc["chains"]:
        chains.append(
            HalfSpaceChain(
                np.array(cdoc["features"], dtype=np.int64),
                [_counter_from_json(c) for c in cdoc["counters"]],
            )
        )
    mode = doc["mode"]
    return ChainEnsemble(
        params=params,
        schema=schema,
        normalizer=normalizer,
        mode=mode,
        dims=int(doc["dims"]),
        delta=np.array(doc["delta"]),
        chains=chains,
        n_fit=int(doc["n_fit"]),
        hashes=HashFamily(params.projection_dims, params.seed) if mode == PROJECTED else None,
        layout=build_layout(schema) if mode == ONE_HOT else None,
    )


def save_ensemble(ensemble: ChainEnsemble, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ensemble_to_json(ensemble)), encoding="utf-8")


def load_ensemble(path: str | Path) -> ChainEnsemble:
    return ensemble_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
