import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomkit.dataio import CATEGORICAL, REAL, DataError, Feature, FeatureSchema, Point
from anomkit.rules import (
    Predicate,
    Rule,
    RuleDB,
    candidate_predicates,
    matches,
    mine_candidates,
    score_rule,
)


@pytest.fixture
def schema():
    return FeatureSchema(
        (
            Feature("amount", REAL),
            Feature("balance", REAL),
            Feature("k_symbol", CATEGORICAL, ("UVER", "POJISTNE", "SIPO")),
        )
    )


def random_points(schema, n, seed):
    rng = np.random.default_rng(seed)
    cats = ("UVER", "POJISTNE", "SIPO")
    return [
        Point((float(rng.uniform(0, 10000)), float(rng.uniform(0, 100000)), cats[rng.integers(0, 3)]))
        for _ in range(n)
    ]


def random_rule(schema, rng):
    preds = []
    if rng.random() < 0.8:
        lo = float(rng.uniform(0, 8000))
        preds.append(Predicate("amount", lo=lo, hi=lo + float(rng.uniform(100, 4000))))
    if rng.random() < 0.5:
        preds.append(Predicate("balance", lo=None, hi=float(rng.uniform(20000, 90000))))
    if rng.random() < 0.5 or not preds:
        preds.append(Predicate("k_symbol", value=("UVER", "POJISTNE", "SIPO")[rng.integers(0, 3)]))
    return Rule(tuple(preds))


class TestMatches:
    def test_interval_containment(self, schema):
        rule = Rule((Predicate("amount", lo=5000, hi=7000),))
        assert matches(rule, Point((6000.0, 0.0, "UVER")), schema)
        assert not matches(rule, Point((7500.0, 0.0, "UVER")), schema)

    def test_categorical_equality(self, schema):
        rule = Rule((Predicate("k_symbol", value="UVER"),))
        assert not matches(rule, Point((0.0, 0.0, "POJISTNE")), schema)
        assert matches(rule, Point((0.0, 0.0, "UVER")), schema)

    def test_unbounded_ends(self, schema):
        rule = Rule((Predicate("balance", lo=90000, hi=None),))
        assert matches(rule, Point((0.0, 95000.0, "UVER")), schema)
        assert not matches(rule, Point((0.0, 89999.0, "UVER")), schema)

    def test_closed_endpoints(self, schema):
        rule = Rule((Predicate("amount", lo=5000, hi=7000),))
        assert matches(rule, Point((5000.0, 0.0, "UVER")), schema)
        assert matches(rule, Point((7000.0, 0.0, "UVER")), schema)

    def test_conjunction_equals_and_of_singles(self, schema):
        # oracle: AND of per-predicate matches over random points
        rng = np.random.default_rng(1)
        points = random_points(schema, 100, seed=2)
        for _ in range(20):
            rule = random_rule(schema, rng)
            for p in points:
                expected = all(matches(Rule((pred,)), p, schema) for pred in rule.predicates)
                assert matches(rule, p, schema) == expected

    def test_unknown_feature_rejected(self, schema):
        rule = Rule((Predicate("nope", lo=0, hi=1),))
        with pytest.raises(DataError):
            matches(rule, Point((0.0, 0.0, "UVER")), schema)

    def test_rule_validation(self):
        with pytest.raises(DataError):
            Rule(())
        with pytest.raises(DataError):
            Rule((Predicate("a", lo=0, hi=1), Predicate("a", lo=2, hi=3)))
        with pytest.raises(DataError):
            Predicate("a", lo=5, hi=1)
        with pytest.raises(DataError):
            Predicate("a")


class TestScoreRule:
    def test_definitional_counts(self, schema):
        # 10 anomalies, 7 match; 100 inliers, 10 pass -> C=0.7, P=0.9
        anomalies = [Point((6000.0, 0.0, "UVER"))] * 7 + [Point((100.0, 0.0, "UVER"))] * 3
        inliers = [Point((6000.0, 0.0, "SIPO"))] * 10 + [Point((1.0, 0.0, "SIPO"))] * 90
        rule = Rule((Predicate("amount", lo=5000, hi=7000),))
        score = score_rule(rule, anomalies, inliers, schema)
        assert score.coverage == pytest.approx(0.7)
        assert score.purity == pytest.approx(0.9)
        assert score.matched_anomalies == 7
        assert score.passing_inliers == 10

    def test_match_everything_extremes(self, schema):
        rule = Rule((Predicate("amount", lo=None, hi=1e12),))
        anomalies = random_points(schema, 10, seed=3)
        inliers = random_points(schema, 20, seed=4)
        score = score_rule(rule, anomalies, inliers, schema)
        assert score.coverage == 1.0
        assert score.purity == 0.0

    def test_empty_inliers_purity_one(self, schema):
        rule = Rule((Predicate("k_symbol", value="UVER"),))
        score = score_rule(rule, [Point((0.0, 0.0, "UVER"))], [], schema)
        assert score.purity == 1.0

    def test_empty_anomaly_group_rejected(self, schema):
        rule = Rule((Predicate("k_symbol", value="UVER"),))
        with pytest.raises(DataError, match="empty anomaly group"):
            score_rule(rule, [], [], schema)

    def test_matches_brute_force_double_loop(self, schema):
        # oracle: independent double loop over points and predicates
        rng = np.random.default_rng(5)
        anomalies = random_points(schema, 40, seed=6)
        inliers = random_points(schema, 60, seed=7)
        for _ in range(30):
            rule = random_rule(schema, rng)
            matched = sum(
                1 for p in anomalies if all(pred.holds(p.values[schema.index_of(pred.feature)]) for pred in rule.predicates)
            )
            passing = sum(
                1 for p in inliers if all(pred.holds(p.values[schema.index_of(pred.feature)]) for pred in rule.predicates)
            )
            score = score_rule(rule, anomalies, inliers, schema)
            assert score.coverage == matched / 40
            assert score.purity == 1.0 - passing / 60

    def test_conjunction_antitone(self, schema):
        # coverage and passing-inlier count never grow when predicates are added
        rng = np.random.default_rng(8)
        anomalies = random_points(schema, 30, seed=9)
        inliers = random_points(schema, 50, seed=10)
        for _ in range(20):
            rule = random_rule(schema, rng)
            for cut in range(1, len(rule.predicates)):
                shorter = Rule(rule.predicates[:cut])
                s_short = score_rule(shorter, anomalies, inliers, schema)
                s_full = score_rule(rule, anomalies, inliers, schema)
                assert s_full.coverage <= s_short.coverage
                assert s_full.passing_inliers <= s_short.passing_inliers
                assert s_full.purity >= s_short.purity


class TestMining:
    def test_impossible_thresholds_empty(self, schema):
        # overlapping classes; demanding both thresholds at 1.0 must yield nothing
        rng = np.random.default_rng(11)
        anomalies = random_points(schema, 25, seed=12)
        inliers = anomalies[:10] + random_points(schema, 40, seed=13)
        assert mine_candidates(anomalies, inliers, schema, 1.0, 1.0) == []

    def test_separable_fixture(self):
        # anomalies concentrated on A in [0.8, 0.9]; inliers uniform on [0, 1]
        rng = np.random.default_rng(14)
        schema = FeatureSchema((Feature("A", REAL), Feature("B", REAL)))
        anomalies = [Point((float(rng.uniform(0.8, 0.9)), float(rng.uniform(0, 1)))) for _ in range(40)]
        inliers = [Point((float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))) for _ in range(400)]
        mined = mine_candidates(anomalies, inliers, schema, coverage_min=0.9, purity_min=0.85)
        assert mined
        rule, score = mined[0]
        assert any(p.feature == "A" for p in rule.predicates)
        assert score.coverage >= 0.9
        assert score.purity >= 0.85
        # oracle: recompute the mined rule's counts exhaustively
        matched = sum(1 for p in anomalies if matches(rule, p, schema))
        passing = sum(1 for p in inliers if matches(rule, p, schema))
        assert score.coverage == matched / len(anomalies)
        assert score.purity == 1 - passing / len(inliers)

    def test_single_anomaly_no_inliers(self, schema):
        anomaly = Point((6000.0, 50000.0, "UVER"))
        mined = mine_candidates([anomaly], [], schema, coverage_min=0.5, purity_min=0.5)
        assert len(mined) == 1
        rule, score = mined[0]
        assert score.coverage == 1.0
        assert score.purity == 1.0
        assert matches(rule, anomaly, schema)

    def test_all_returned_rules_respect_thresholds(self, schema):
        rng = np.random.default_rng(15)
        anomalies = random_points(schema, 30, seed=16)
        inliers = random_points(schema, 120, seed=17)
        for cov_min, pur_min in ((0.3, 0.3), (0.5, 0.6), (0.7, 0.2)):
            for rule, score in mine_candidates(anomalies, inliers, schema, cov_min, pur_min):
                assert score.coverage >= cov_min
                assert score.purity >= pur_min

    def test_distinct_leading_features_and_cap(self):
        rng = np.random.default_rng(18)
        schema = FeatureSchema(
            (Feature("A", REAL), Feature("B", REAL), Feature("C", REAL), Feature("D", REAL))
        )
        anomalies = [
            Point(tuple(float(v) for v in rng.uniform(0.7, 0.8, size=4))) for _ in range(30)
        ]
        inliers = [Point(tuple(float(v) for v in rng.uniform(0, 1, size=4))) for _ in range(300)]
        mined = mine_candidates(anomalies, inliers, schema, coverage_min=0.8, purity_min=0.7)
        assert 1 <= len(mined) <= 3
        leading = [rule.predicates[0].feature for rule, _ in mined]
        assert len(set(leading)) == len(leading)

    def test_empty_anomaly_group_rejected(self, schema):
        with pytest.raises(DataError):
            mine_candidates([], [], schema, 0.5, 0.5)

    def test_threshold_validation(self, schema):
        with pytest.raises(DataError):
            mine_candidates([Point((0.0, 0.0, "UVER"))], [], schema, -0.1, 0.5)

    def test_candidate_predicates_catch_peaks(self, schema):
        rng = np.random.default_rng(19)
        anomalies = [Point((float(rng.normal(6000, 50)), float(rng.normal(70000, 100)), "UVER")) for _ in range(50)]
        preds = candidate_predicates(anomalies, schema)
        by_feature = {p.feature for p in preds}
        assert by_feature == {"amount", "balance", "k_symbol"}
        cat = [p for p in preds if p.feature == "k_symbol"]
        assert cat and cat[0].value == "UVER"


class TestRuleDB:
    def test_save_then_list_identical(self, tmp_path, schema):
        db = RuleDB(tmp_path / "rules.jsonl")
        rule = Rule((Predicate("amount", lo=5000.0, hi=7000.0),), meta={"source": "analyst"})
        score = score_rule(rule, [Point((6000.0, 0.0, "UVER"))], [], schema)
        db.save_rule(rule, score, "fp123")
        records = db.list_rules()
        assert len(records) == 1
        assert Rule.from_json(records[0]["rule"]) == rule
        assert records[0]["fingerprint"] == "fp123"

    def test_empty_db_lists_empty(self, tmp_path):
        assert RuleDB(tmp_path / "missing.jsonl").list_rules() == []

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(min_value=0, max_value=2**31 - 1))
    def test_rules_roundtrip_bit_exact(self, seed):
        rng = np.random.default_rng(seed)
        schema = FeatureSchema(
            (
                Feature("amount", REAL),
                Feature("balance", REAL),
                Feature("k_symbol", CATEGORICAL, ("UVER", "POJISTNE", "SIPO")),
            )
        )
        rule = random_rule(schema, rng)
        again = Rule.from_json(json.loads(json.dumps(rule.to_json())))
        assert again == rule
        assert [p.to_json() for p in again.predicates] == [p.to_json() for p in rule.predicates]

    def test_fifty_random_rules_through_db(self, tmp_path, schema):
        rng = np.random.default_rng(20)
        db = RuleDB(tmp_path / "rules.jsonl")
        saved = []
        anomalies = random_points(schema, 5, seed=21)
        for _ in range(50):
            rule = random_rule(schema, rng)
            saved.append(rule)
            db.save_rule(rule, score_rule(rule, anomalies, [], schema), "fp")
        loaded = [Rule.from_json(rec["rule"]) for rec in db.list_rules()]
        assert loaded == saved
