"""Analyst-facing analytics: importance-space clustering, 2-D embedding,
budgeted plot selection, and ranking metrics."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import pdist, squareform
from scipy.stats import rankdata

from .dataio import DatasetTable, select_features
from .detector import DetectorParams, final_scores, fit, score_batch
from .explain import ImportanceVector

EIG_TOL = 1e-10


def _importance_rows(importances) -> np.ndarray:
    rows = np.array([iv.weights if isinstance(iv, ImportanceVector) else iv for iv in importances], dtype=np.float64)
    sums = rows.sum(axis=1, keepdims=True)
    return np.divide(rows, sums, out=rows.copy(), where=sums > 0)


def cluster_anomalies(importances, k: int) -> np.ndarray:
    """Average-linkage Euclidean clustering of importance vectors, cut at k.

    Labels are canonical: clusters are numbered by their smallest member
    index, so the assignment is invariant to input permutations.
    """
    rows = _importance_rows(importances)
    n = rows.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"cluster count {k} out of range [1, {n}]")
    if k == n:
        raw = np.arange(n)
    elif k == 1 or n == 1:
        raw = np.zeros(n, dtype=np.int64)
    else:
        raw = fcluster(linkage(rows, method="average", metric="euclidean"), k, criterion="maxclust")
    relabel: dict[int, int] = {}
    out = np.empty(n, dtype=np.int64)
    for i, c in enumerate(raw):
        if c not in relabel:
            relabel[c] = len(relabel)
        out[i] = relabel[c]
    return out


def mds_embed(importances) -> np.ndarray:
    """Classical 2-D multidimensional scaling of importance vectors.

    Double-centers the squared-distance matrix and keeps the top two
    eigenpairs; each axis is reflected so its largest-magnitude coordinate
    is positive, fixing the sign convention.
    """
    rows = _importance_rows(importances)
    n = rows.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points to embed")
    d2 = squareform(pdist(rows, metric="euclidean")) ** 2
    j = np.eye(n) - np.ones((n, n)) / n
    b = -0.5 * j @ d2 @ j
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1][:2]
    coords = np.zeros((n, 2))
    for axis, idx in enumerate(order):
        if evals[idx] > EIG_TOL:
            coords[:, axis] = evecs[:, idx] * np.sqrt(evals[idx])
    for axis in range(2):
        col = coords[:, axis]
        if col[np.argmax(np.abs(col))] < 0:
            coords[:, axis] = -col
    return coords


@dataclass(frozen=True)
class SummaryLayout:
    """Everything the summary scatter needs for the current anomaly set."""

    rows: tuple[int, ...]
    coords: np.ndarray
    cluster_ids: np.ndarray
    scores: np.ndarray
    importances: tuple[ImportanceVector, ...]

    def to_json(self) -> dict:
        return {
            "anomalies": [
                {
                    "row": int(r),
                    "x": float(self.coords[i, 0]),
                    "y": float(self.coords[i, 1]),
                    "cluster": int(self.cluster_ids[i]),
                    "score": float(self.scores[i]),
                    "importances": self.importances[i].to_json(),
                }
                for i, r in enumerate(self.rows)
            ]
        }


def build_summary(rows, importances, scores, k: int) -> SummaryLayout:
    ids = cluster_anomalies(importances, k)
    coords = mds_embed(importances) if len(rows) >= 2 else np.zeros((len(rows), 2))
    return SummaryLayout(tuple(int(r) for r in rows), coords, ids, np.asarray(scores, dtype=float), tuple(importances))


@dataclass(frozen=True)
class LookoutSelection:
    """Budgeted feature-pair selection maximizing total incrimination."""

    budget: int
    pairs: tuple[tuple[str, str], ...]          # selected, in pick order
    all_pairs: tuple[tuple[str, str], ...]
    incrimination: np.ndarray                   # (n_pairs, n_anomalies)
    objective: float

    def to_json(self) -> dict:
        index = {p: i for i, p in enumerate(self.all_pairs)}
        return {
            "budget": self.budget,
            "pairs": [
                {
                    "fx": p[0],
                    "fy": p[1],
                    "incrimination": [float(v) for v in self.incrimination[index[p]]],
                }
                for p in self.pairs
            ],
            "objective": float(self.objective),
        }


def lookout_objective(incrimination: np.ndarray, selected: list[int]) -> float:
    """Sum over anomalies of the best incrimination among selected pairs."""
    if not selected:
        return 0.0
    return float(incrimination[selected].max(axis=0).sum())


def lookout_select(
    anomalies: DatasetTable,
    inliers: DatasetTable,
    budget: int,
    n_chains: int = 20,
    depth: int = 8,
    seed: int = 0,
) -> LookoutSelection:
    """Pick up to `budget` real-feature pairs whose 2-D views best expose the
    anomalies.

    Each pair gets a small no-projection ensemble fitted on the inliers
    restricted to the pair; an anomaly's incrimination under the pair is
    1/(1 + score). Selection greedily maximizes the summed best-pair
    incrimination, a monotone submodular objective.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    real_names = [anomalies.schema.features[i].name for i in anomalies.schema.real_indices()]
    if len(real_names) < 2:
        raise ValueError("need at least 2 real features")
    pairs = list(combinations(real_names, 2))

    incrimination = np.zeros((len(pairs), anomalies.n_rows))
    for pi, (fx, fy) in enumerate(pairs):
        sub_in = select_features(inliers, [fx, fy])
        sub_an = select_features(anomalies, [fx, fy])
        ensemble = fit(sub_in, DetectorParams(n_chains=n_chains, depth=depth, projection_dims=None, seed=seed))
        scores = final_scores(score_batch(sub_an, ensemble))
        incrimination[pi] = 1.0 / (1.0 + scores)

    selected: list[int] = []
    current = 0.0
    for _ in range(min(budget, len(pairs))):
        gains = np.array(
            [lookout_objective(incrimination, selected + [p]) - current if p not in selected else -np.inf for p in range(len(pairs))]
        )
        best = int(np.argmax(gains))
        selected.append(best)
        current += float(gains[best])
    return LookoutSelection(
        budget=budget,
        pairs=tuple(pairs[i] for i in selected),
        all_pairs=tuple(pairs),
        incrimination=incrimination,
        objective=current,
    )


def ndcg(predicted_weights: np.ndarray, truth_weights: np.ndarray) -> float:
    """Normalized discounted cumulative gain of the predicted feature order.

    Features are ranked by descending predicted weight (ties keep feature
    order); relevance is the ground-truth weight; the discount is log2 of
    the 1-based rank plus one. All-zero truth scores 1 by convention.
    """
    predicted = np.asarray(predicted_weights, dtype=float)
    truth = np.asarray(truth_weights, dtype=float)
    if predicted.shape != truth.shape or predicted.ndim != 1 or predicted.size < 1:
        raise ValueError("predicted and truth weights must be equal-length 1-D vectors")
    if np.all(truth == 0):
        return 1.0
    discounts = 1.0 / np.log2(np.arange(2, truth.size + 2))
    dcg = float(truth[np.argsort(-predicted, kind="stable")] @ discounts)
    idcg = float(np.sort(truth)[::-1] @ discounts)
    return dcg / idcg


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUROC where LOWER scores mean more anomalous.

    Equals the Mann-Whitney statistic of the negated scores against the
    anomaly labels; tied scores contribute 1/2.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    ranks = rankdata(-scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
