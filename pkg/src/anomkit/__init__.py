"""Anomaly detection, explanation, simulation, and rule-design toolkit."""

from .dataio import (
    DataError,
    DatasetTable,
    Feature,
    FeatureSchema,
    NormalizationState,
    Point,
    fit_normalizer,
    load_csv,
    normalize,
    save_csv,
)
from .detector import ChainEnsemble, DetectorParams, ScoreReport, fit, score, score_batch
from .explain import ImportanceVector, explain, explain_batch
from .insight import auroc, cluster_anomalies, lookout_select, mds_embed, ndcg
from .rules import Predicate, Rule, RuleDB, RuleScore, matches, mine_candidates, score_rule
from .simulate import GenModel, InflationPolicy, SimBundle, synthesize, train_genmodel

__version__ = "0.1.0"
