import numpy as np
import pytest

from anomkit.dataio import CATEGORICAL, REAL, DatasetTable, Feature, FeatureSchema, Point


@pytest.fixture
def mixed_schema():
    return FeatureSchema(
        (
            Feature("amount", REAL),
            Feature("balance", REAL),
            Feature("k_symbol", CATEGORICAL, ("UVER", "POJISTNE", "SIPO")),
        )
    )


def make_mixed_table(n: int, seed: int = 0, labels=None) -> DatasetTable:
    rng = np.random.default_rng(seed)
    schema = FeatureSchema(
        (
            Feature("amount", REAL),
            Feature("balance", REAL),
            Feature("k_symbol", CATEGORICAL, ("UVER", "POJISTNE", "SIPO")),
        )
    )
    cats = ("UVER", "POJISTNE", "SIPO")
    rows = tuple(
        Point(
            (
                float(rng.normal(6000, 500)),
                float(rng.normal(70000, 9000)),
                cats[rng.integers(0, 3)],
            )
        )
        for _ in range(n)
    )
    return DatasetTable(schema, rows, labels)


@pytest.fixture
def mixed_table():
    return make_mixed_table(60, seed=7)
