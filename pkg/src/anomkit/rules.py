"""Conjunctive detection rules: matching, coverage/purity scoring, density-peak
candidate mining, and a JSON-lines rule database.

Rules evaluate on raw feature values so analysts read them in natural
units; normalization is internal to the detector only.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import gaussian_kde

from .dataio import CATEGORICAL, REAL, DataError, FeatureSchema, Point

PEAK_DENSITY_FRACTION = 0.2   # keep KDE regions at >= this fraction of the max
CATEGORY_MIN_FRACTION = 0.3   # keep category values at >= this anomaly frequency
KDE_GRID_SIZE = 512


@dataclass(frozen=True)
class Predicate:
    """Interval test for a real feature, equality test for a categorical one.

    Interval ends are closed where finite; None means unbounded.
    """

    feature: str
    lo: float | None = None
    hi: float | None = None
    value: str | None = None

    def __post_init__(self):
        if self.value is not None and (self.lo is not None or self.hi is not None):
            raise DataError(f"predicate on {self.feature!r} mixes interval and equality")
        if self.value is None and self.lo is None and self.hi is None:
            raise DataError(f"predicate on {self.feature!r} is vacuous")
        if self.lo is not None and self.hi is not None and self.lo > self.hi:
            raise DataError(f"predicate on {self.feature!r}: lo {self.lo} > hi {self.hi}")

    def holds(self, v) -> bool:
        if self.value is not None:
            return v == self.value
        if self.lo is not None and v < self.lo:
            return False
        if self.hi is not None and v > self.hi:
            return False
        return True

    def to_json(self) -> dict:
        if self.value is not None:
            return {"feature": self.feature, "value": self.value}
        return {"feature": self.feature, "lo": self.lo, "hi": self.hi}

    @staticmethod
    def from_json(doc: dict) -> "Predicate":
        if "value" in doc and doc["value"] is not None:
            return Predicate(doc["feature"], value=doc["value"])
        return Predicate(doc["feature"], lo=doc.get("lo"), hi=doc.get("hi"))


@dataclass(frozen=True)
class Rule:
    """Conjunction of predicates, at most one per feature."""

    predicates: tuple[Predicate, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.predicates:
            raise DataError("a rule needs at least one predicate")
        names = [p.feature for p in self.predicates]
        if len(set(names)) != len(names):
            raise DataError("a rule may hold at most one predicate per feature")

    def to_json(self) -> dict:
        return {"predicates": [p.to_json() for p in self.predicates], "meta": dict(self.meta)}

    @staticmethod
    def from_json(doc: dict) -> "Rule":
        return Rule(tuple(Predicate.from_json(p) for p in doc["predicates"]), dict(doc.get("meta", {})))


@dataclass(frozen=True)
class RuleScore:
    coverage: float
    purity: float
    matched_anomalies: int
    passing_inliers: int

    def to_json(self) -> dict:
        return {
            "coverage": self.coverage,
            "purity": self.purity,
            "matched_anomalies": self.matched_anomalies,
            "passing_inliers": self.passing_inliers,
        }


def matches(rule: Rule, point: Point, schema: FeatureSchema) -> bool:
    """True iff every predicate holds on the point's raw values."""
    for p in rule.predicates:
        if not p.holds(point.values[schema.index_of(p.feature)]):
            return False
    return True


def score_rule(rule: Rule, anomalies: Sequence[Point], inliers: Sequence[Point], schema: FeatureSchema) -> RuleScore:
    """Coverage = matched anomalies / group size; purity = 1 - passing inliers / inlier count.

    An empty inlier list yields purity 1; an empty anomaly group is an error.
    """
    if not anomalies:
        raise DataError("empty anomaly group")
    matched = sum(1 for p in anomalies if matches(rule, p, schema))
    passing = sum(1 for p in inliers if matches(rule, p, schema))
    purity = 1.0 if not inliers else 1.0 - passing / len(inliers)
    return RuleScore(matched / len(anomalies), purity, matched, passing)


# -- candidate mining ---------------------------------------------------------


def _real_peak_predicates(name: str, values: np.ndarray, theta_peak: float) -> list[Predicate]:
    """Maximal intervals where the anomaly-group KDE stays above a fraction
    of its peak. Degenerate samples collapse to their exact value range."""
    lo, hi = float(values.min()), float(values.max())
    if len(values) < 2 or hi == lo:
        return [Predicate(name, lo=lo, hi=hi)]
    try:
        kde = gaussian_kde(values, bw_method="silverman")
    except np.linalg.LinAlgError:
        return [Predicate(name, lo=lo, hi=hi)]
    grid = np.linspace(lo, hi, KDE_GRID_SIZE)
    density = kde(grid)
    keep = density >= theta_peak * density.max()
    preds: list[Predicate] = []
    start = None
    for i, flag in enumerate(keep):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            preds.append(Predicate(name, lo=float(grid[start]), hi=float(grid[i - 1])))
            start = None
    if start is not None:
        preds.append(Predicate(name, lo=float(grid[start]), hi=hi))
    return preds


def _categorical_predicates(name: str, values: list[str], theta_cat: float) -> list[Predicate]:
    counts: dict[str, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    cut = theta_cat * len(values)
    return [Predicate(name, value=v) for v in sorted(counts) if counts[v] >= cut]


def candidate_predicates(
    anomalies: Sequence[Point],
    schema: FeatureSchema,
    theta_peak: float = PEAK_DENSITY_FRACTION,
    theta_cat: float = CATEGORY_MIN_FRACTION,
) -> list[Predicate]:
    """Per-feature density peaks of the anomaly group, as predicates."""
    preds: list[Predicate] = []
    for i, f in enumerate(schema.features):
        col = [p.values[i] for p in anomalies]
        if f.kind == REAL:
            preds.extend(_real_peak_predicates(f.name, np.asarray(col, dtype=float), theta_peak))
        else:
            preds.extend(_categorical_predicates(f.name, col, theta_cat))
    return preds


def _masks(pred: Predicate, points: Sequence[Point], schema: FeatureSchema) -> np.ndarray:
    i = schema.index_of(pred.feature)
    return np.array([pred.holds(p.values[i]) for p in points], dtype=bool)


def mine_candidates(
    anomalies: Sequence[Point],
    inliers: Sequence[Point],
    schema: FeatureSchema,
    coverage_min: float,
    purity_min: float,
    max_rules: int = 3,
    theta_peak: float = PEAK_DENSITY_FRACTION,
    theta_cat: float = CATEGORY_MIN_FRACTION,
) -> list[tuple[Rule, RuleScore]]:
    """Mine up to max_rules conjunctive rules meeting both thresholds.

    Candidate predicates are the anomaly group's per-feature density peaks.
    Each rule grows by greedy forward selection: among predicates keeping
    coverage >= coverage_min, add the one maximizing purity (ties: higher
    coverage, then feature name), stopping once purity_min is met or no
    addition improves purity. Returned rules have distinct leading
    features; an empty list means no qualifying rule exists.
    """
    if not anomalies:
        raise DataError("empty anomaly group")
    if not (0.0 <= coverage_min <= 1.0 and 0.0 <= purity_min <= 1.0):
        raise DataError("thresholds must lie in [0, 1]")

    pool = candidate_predicates(anomalies, schema, theta_peak, theta_cat)
    if not pool:
        return []
    anom_masks = np.stack([_masks(p, anomalies, schema) for p in pool])
    inlier_masks = (
        np.stack([_masks(p, inliers, schema) for p in pool])
        if inliers
        else np.zeros((len(pool), 0), dtype=bool)
    )
    n_anom, n_inlier = len(anomalies), len(inliers)

    if n_inlier == 0:
        # no purity signal to discriminate on: emit one rule combining the
        # group's peak predicates, greedily keeping coverage above threshold
        chosen: list[int] = []
        cur = np.ones(n_anom, dtype=bool)
        order = sorted(range(len(pool)), key=lambda j: (-anom_masks[j].sum(), pool[j].feature))
        for j in order:
            if pool[j].feature in {pool[i].feature for i in chosen}:
                continue
            joined = cur & anom_masks[j]
            if joined.sum() / n_anom >= coverage_min:
                chosen.append(j)
                cur = joined
        if not chosen:
            return []
        rule = Rule(tuple(pool[i] for i in chosen), meta={"source": "mined"})
        return [(rule, score_rule(rule, anomalies, inliers, schema))]

    def stats(anom_mask: np.ndarray, inlier_mask: np.ndarray) -> tuple[float, float]:
        coverage = anom_mask.sum() / n_anom
        purity = 1.0 if n_inlier == 0 else 1.0 - inlier_mask.sum() / n_inlier
        return float(coverage), float(purity)

    def grow(first: int) -> tuple[list[int], float, float] | None:
        chosen = [first]
        cur_a, cur_i = anom_masks[first].copy(), inlier_masks[first].copy()
        coverage, purity = stats(cur_a, cur_i)
        if coverage < coverage_min:
            return None
        while purity < purity_min:
            used = {pool[i].feature for i in chosen}
            best = None  # (coverage, purity, predicate index, masks)
            for j, pred in enumerate(pool):
                if pred.feature in used:
                    continue
                a = cur_a & anom_masks[j]
                i_ = cur_i & inlier_masks[j]
                c, p = stats(a, i_)
                if c < coverage_min or p <= purity:
                    continue
                better = best is None or (p, c) > (best[1], best[0]) or (
                    (p, c) == (best[1], best[0]) and pred.feature < pool[best[2]].feature
                )
                if better:
                    best = (c, p, j, a, i_)
            if best is None:
                break
            coverage, purity, j, cur_a, cur_i = best
            chosen.append(j)
        if coverage >= coverage_min and purity >= purity_min:
            return chosen, coverage, purity
        return None

    # rank opening predicates by their single-predicate quality
    opening_order = sorted(
        range(len(pool)),
        key=lambda j: (-stats(anom_masks[j], inlier_masks[j])[1], -stats(anom_masks[j], inlier_masks[j])[0], pool[j].feature),
    )

    results: list[tuple[Rule, RuleScore]] = []
    used_leading: set[str] = set()
    for j in opening_order:
        if len(results) >= max_rules:
            break
        if pool[j].feature in used_leading:
            continue
        grown = grow(j)
        if grown is None:
            continue
        chosen, coverage, purity = grown
        rule = Rule(tuple(pool[i] for i in chosen), meta={"source": "mined"})
        score = score_rule(rule, anomalies, inliers, schema)
        results.append((rule, score))
        used_leading.add(pool[j].feature)
    return results


# -- persistence ----------------------------------------------------------------


class RuleDB:
    """Append-only JSON-lines store of (rule, score, dataset fingerprint)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def save_rule(self, rule: Rule, score: RuleScore, fingerprint: str) -> dict:
        record = {"rule": rule.to_json(), "score": score.to_json(), "fingerprint": fingerprint}
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    def list_rules(self) -> list[dict]:
        if not self.path.exists():
            return []
        with self._lock:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        return [json.loads(line) for line in lines if line.strip()]
