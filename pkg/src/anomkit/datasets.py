"""Synthetic mixed-type fixture data for demos, scripts, and tests."""

from __future__ import annotations

import numpy as np

from .dataio import CATEGORICAL, REAL, DatasetTable, Feature, FeatureSchema, Point

REGIONS = ("us-east", "us-west", "eu", "ap")
REGION_P = (0.5, 0.25, 0.2, 0.05)
STATUSES = ("ok", "degraded", "error")
STATUS_P = (0.85, 0.12, 0.03)


def make_service_telemetry(n: int, seed: int = 0) -> DatasetTable:
    """Two-regime service telemetry: four real and two categorical features.

    A high-load regime shifts latency, cpu and io jointly; memory tracks
    cpu linearly. Categorical marginals are deliberately skewed so the
    least-frequent values are meaningful inflation targets.
    """
    rng = np.random.default_rng(seed)
    high = rng.random(n) < 0.4
    latency = np.where(high, rng.normal(90.0, 8.0, n), rng.normal(40.0, 5.0, n))
    cpu = np.where(high, rng.normal(0.70, 0.08, n), rng.normal(0.30, 0.05, n))
    mem = 200.0 + 300.0 * cpu + rng.normal(0.0, 20.0, n)
    io_wait = np.where(high, rng.normal(12.0, 2.0, n), rng.normal(5.0, 1.0, n))
    region = rng.choice(REGIONS, size=n, p=REGION_P)
    status = rng.choice(STATUSES, size=n, p=STATUS_P)

    schema = FeatureSchema(
        (
            Feature("latency_ms", REAL),
            Feature("cpu_load", REAL),
            Feature("mem_mb", REAL),
            Feature("io_wait_ms", REAL),
            Feature("region", CATEGORICAL, REGIONS),
            Feature("status", CATEGORICAL, STATUSES),
        )
    )
    rows = tuple(
        Point(
            (
                float(latency[i]),
                float(cpu[i]),
                float(mem[i]),
                float(io_wait[i]),
                str(region[i]),
                str(status[i]),
            )
        )
        for i in range(n)
    )
    return DatasetTable(schema, rows)
