"""Per-anomaly feature importances derived from the fitted chain ensemble.

A chain "uses" a dimension for a point when that dimension was sampled at
or above the chain's scoring level for the point. The raw importance of a
dimension is the mean score of the chains using it; the stored importance
applies the monotone-decreasing transform 1/(1 + raw) so dimensions whose
using-chains found the point rarest rank first. In projected mode the
per-dimension weights are pushed back to original features by a random
walk with restart on the point's projection/feature bipartite graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import CATEGORICAL, REAL, DatasetTable, FeatureSchema, Point
from .detector import (
    ONE_HOT,
    PROJECTED,
    ChainEnsemble,
    HashFamily,
    ScoreReport,
    score,
    score_batch,
)

RESTART_PROBABILITY = 0.15
RWR_TOL = 1e-9
RWR_MAX_ITER = 500


@dataclass(frozen=True)
class ProjectedImportances:
    """Per-dimension weights over the chain feature space.

    raw_means holds the plain mean score over each dimension's using
    chains; weights holds the 1/(1 + raw) transform, zero for dimensions
    no chain used.
    """

    weights: np.ndarray
    usage_counts: np.ndarray
    raw_means: np.ndarray


@dataclass(frozen=True)
class ImportanceVector:
    """Nonnegative per-original-feature weights, aligned with the schema.

    Sums to 1 unless no chain used any feature (then all-zero).
    """

    schema: FeatureSchema
    weights: np.ndarray

    def to_json(self) -> dict[str, float]:
        order = np.argsort(-self.weights, kind="stable")
        return {self.schema.features[i].name: float(self.weights[i]) for i in order}

    def ranking(self) -> np.ndarray:
        return np.argsort(-self.weights, kind="stable")


@dataclass(frozen=True)
class AttributionGraph:
    """Bipartite adjacency between K projected dims and original features.

    Built per explained point: an edge (k, F) exists when the hash of F
    (or of F combined with the point's categorical value) is nonzero,
    i.e. when F participates in projection dimension k's compound.
    """

    adjacency: np.ndarray  # (K, n_features) of {0, 1}


def chain_usage(point: Point, ensemble: ChainEnsemble, report: ScoreReport | None = None) -> list[list[int]]:
    """Indices of the chains using each dimension for this point.

    Chain m uses dimension f iff f appears among the chain's halving
    features from the top down to m's scoring level for the point.
    """
    if report is None:
        report = score(point, ensemble)
    usage: list[list[int]] = [[] for _ in range(ensemble.dims)]
    for m, chain in enumerate(ensemble.chains):
        level = int(report.chain_levels[m])
        for f in np.unique(chain.features[:level]):
            usage[int(f)].append(m)
    return usage


def projected_importances(
    point: Point, ensemble: ChainEnsemble, report: ScoreReport | None = None
) -> ProjectedImportances:
    """Mean using-chain score per dimension plus its decreasing transform."""
    if report is None:
        report = score(point, ensemble)
    dims = ensemble.dims
    sums = np.zeros(dims)
    counts = np.zeros(dims, dtype=np.int64)
    for m, chain in enumerate(ensemble.chains):
        level = int(report.chain_levels[m])
        used = np.unique(chain.features[:level])
        sums[used] += report.chain_scores[m]
        counts[used] += 1
    raw = np.zeros(dims)
    weights = np.zeros(dims)
    mask = counts > 0
    raw[mask] = sums[mask] / counts[mask]
    weights[mask] = 1.0 / (1.0 + raw[mask])
    return ProjectedImportances(weights, counts, raw)


def build_attribution_graph(point: Point, hashes: HashFamily, schema: FeatureSchema) -> AttributionGraph:
    adjacency = np.zeros((hashes.n_dims, schema.n_features), dtype=np.int64)
    for i, f in enumerate(schema.features):
        token = f.name if f.kind == REAL else HashFamily.categorical_token(f.name, point.values[i])
        adjacency[:, i] = hashes.vector(token) != 0
    return AttributionGraph(adjacency)


def attribute(
    graph: AttributionGraph,
    fly_back: np.ndarray,
    alpha: float = RESTART_PROBABILITY,
    tol: float = RWR_TOL,
    max_iter: int = RWR_MAX_ITER,
) -> np.ndarray:
    """Random walk with restart pushing projected weights onto original features.

    fly_back must be a probability vector over the projected dimensions.
    Iterates the two-step diffusion (projected <- originals + restart,
    originals <- projected), renormalizing the original-side vector each
    round, until its L1 change falls below tol.
    """
    a = np.asarray(graph.adjacency, dtype=np.float64)
    if a.sum() == 0:
        raise ValueError("attribution graph has no edges")
    total = fly_back.sum()
    if total <= 0:
        raise ValueError("fly-back distribution is all-zero")
    if abs(total - 1.0) > 1e-9:
        raise ValueError("fly-back distribution must sum to 1")

    proj_deg = a.sum(axis=1)
    orig_deg = a.sum(axis=0)
    a_hat = np.divide(a, proj_deg[:, None], out=np.zeros_like(a), where=proj_deg[:, None] > 0)
    b_hat = np.divide(a.T, orig_deg[:, None], out=np.zeros_like(a.T), where=orig_deg[:, None] > 0)

    n_orig = a.shape[1]
    pi_o = np.full(n_orig, 1.0 / n_orig)
    for _ in range(max_iter):
        pi_p = (1.0 - alpha) * (a_hat @ pi_o) + alpha * fly_back
        nxt = (1.0 - alpha) * (b_hat @ pi_p)
        s = nxt.sum()
        if s > 0:
            nxt = nxt / s
        if np.abs(nxt - pi_o).sum() < tol:
            pi_o = nxt
            break
        pi_o = nxt
    return pi_o


def _normalize_fly_back(weights: np.ndarray) -> np.ndarray:
    total = weights.sum()
    if total <= 0:
        return np.full(weights.shape, 1.0 / len(weights))
    return weights / total


def explain(
    point: Point,
    ensemble: ChainEnsemble,
    report: ScoreReport | None = None,
    alpha: float = RESTART_PROBABILITY,
) -> ImportanceVector:
    """Original-feature importance weights for one (anomalous) point."""
    proj = projected_importances(point, ensemble, report)
    schema = ensemble.schema
    if ensemble.mode == PROJECTED:
        graph = build_attribution_graph(point, ensemble.hashes, schema)
        weights = attribute(graph, _normalize_fly_back(proj.weights), alpha=alpha)
    else:
        weights = np.zeros(schema.n_features)
        for fi, cols in ensemble.layout.blocks().items():
            weights[fi] = proj.weights[cols].sum()
        total = weights.sum()
        if total > 0:
            weights = weights / total
    return ImportanceVector(schema, weights)


def explain_batch(
    data: DatasetTable,
    ensemble: ChainEnsemble,
    reports: list[ScoreReport] | None = None,
    alpha: float = RESTART_PROBABILITY,
) -> list[ImportanceVector]:
    if reports is None:
        reports = score_batch(data, ensemble)
    return [explain(p, ensemble, report=r, alpha=alpha) for p, r in zip(data.rows, reports)]
