"""Batch command-line workflows over the library.

Every command accepts --seed and --config, exits 0 on success, and prints
a single machine-readable JSON error line to stderr otherwise.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import detector, insight, rules as rules_mod, simulate as sim_mod
from .explain import explain as explain_point
from .config import load_config
from .dataio import DataError, dataset_fingerprint, load_csv
from .datasets import make_service_telemetry
from .detector import DetectorParams


def _fail(message: str) -> None:
    print(json.dumps({"error": message}), file=sys.stderr)
    sys.exit(1)


def cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (DataError, sim_mod.SimulationError, ValueError, OSError) as exc:
            _fail(str(exc))

    return wrapper


def _detector_params(config_path, seed, chains, depth, projection, counter) -> DetectorParams:
    cfg = load_config(config_path)
    return DetectorParams(
        n_chains=chains if chains is not None else cfg.n_chains,
        depth=depth if depth is not None else cfg.depth,
        projection_dims=(None if projection in (None, "none") else int(projection))
        if projection is not None
        else cfg.projection_dims,
        counter=counter if counter is not None else cfg.counter,
        seed=seed if seed is not None else cfg.seed,
    )


def _common_options(fn):
    fn = click.option("--seed", type=int, default=None, help="Random seed override.")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True), default=None, help="key=value config file.")(fn)
    return fn


@click.group()
def main():
    """Anomaly detection, explanation, simulation, and rule tooling."""


@main.command()
@click.option("--train-data", type=click.Path(exists=True), default=None, help="CSV of normal points to fit the generator on; defaults to a built-in telemetry fixture.")
@click.option("--train-schema", type=click.Path(exists=True), default=None)
@click.option("--train-rows", type=int, default=2000, show_default=True, help="Fixture size when no training data is given.")
@click.option("--normals", "m", type=int, default=1000, show_default=True)
@click.option("--anomalies", "k", type=int, default=100, show_default=True)
@click.option("--epsilon", type=float, default=0.5, show_default=True)
@click.option("--preset", type=click.Choice(sorted(sim_mod.PRESETS)), default="desk", show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
@_common_options
@cli_errors
def simulate(train_data, train_schema, train_rows, m, k, epsilon, preset, out_dir, seed, config_path):
    """Train the generator and write a labeled synthetic bundle."""
    cfg = load_config(config_path)
    seed = cfg.seed if seed is None else seed
    if train_data is not None:
        if train_schema is None:
            _fail("--train-schema is required with --train-data")
        source = load_csv(train_data, train_schema)
    else:
        source = make_service_telemetry(train_rows, seed=seed)
    train_cfg = sim_mod.PRESETS[preset]
    model = sim_mod.train_genmodel(source, sim_mod.TrainConfig(**{**train_cfg.__dict__, "seed": seed}))
    marginals = sim_mod.build_marginals(source, seed=seed)
    bundle = sim_mod.synthesize(model, marginals, m=m, k=k, epsilon=epsilon, seed=seed)
    bundle.save(out_dir)
    click.echo(json.dumps({"out_dir": str(out_dir), "normals": m, "anomalies": k, "threshold": bundle.threshold}))


def _detector_options(fn):
    fn = click.option("--chains", type=int, default=None, help="Ensemble size.")(fn)
    fn = click.option("--depth", type=int, default=None, help="Chain depth.")(fn)
    fn = click.option("--projection", default=None, help="Projection dimensions, or 'none'.")(fn)
    fn = click.option("--counter", type=click.Choice(["exact", "cms"]), default=None)(fn)
    return fn


@main.command()
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--schema", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="Scores CSV (row,score).")
@click.option("--save-ensemble", type=click.Path(), default=None)
@_detector_options
@_common_options
@cli_errors
def detect(data, schema, out, save_ensemble, chains, depth, projection, counter, seed, config_path):
    """Fit the detector on a dataset and write per-row anomaly scores."""
    table = load_csv(data, schema)
    params = _detector_params(config_path, seed, chains, depth, projection, counter)
    ensemble = detector.fit(table, params)
    scores = detector.final_scores(detector.score_batch(table, ensemble))
    with Path(out).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "score"])
        for i, s in enumerate(scores):
            writer.writerow([i, repr(float(s))])
    if save_ensemble:
        detector.save_ensemble(ensemble, save_ensemble)
    click.echo(json.dumps({"rows": table.n_rows, "out": str(out)}))


@main.command()
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--schema", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True, help="Importances JSON.")
@click.option("--ensemble", "ensemble_path", type=click.Path(exists=True), default=None, help="Reuse a saved ensemble instead of fitting.")
@click.option("--rows", default=None, help="Comma-separated row indices to explain.")
@click.option("--top", type=int, default=50, show_default=True, help="Explain the top-k lowest scores when no rows/labels are given.")
@_detector_options
@_common_options
@cli_errors
def explain(data, schema, out, ensemble_path, rows, top, chains, depth, projection, counter, seed, config_path):
    """Write per-row feature importances for the anomalies of a dataset."""
    table = load_csv(data, schema)
    if ensemble_path:
        ensemble = detector.load_ensemble(ensemble_path)
    else:
        ensemble = detector.fit(table, _detector_params(config_path, seed, chains, depth, projection, counter))
    reports = detector.score_batch(table, ensemble)
    if rows:
        targets = [int(r) for r in rows.split(",")]
    elif table.labels is not None and any(table.labels):
        targets = [i for i, l in enumerate(table.labels) if l == 1]
    else:
        scores = detector.final_scores(reports)
        targets = [int(i) for i in np.argsort(scores, kind="stable")[: min(top, len(scores))]]
    docs = []
    for r in targets:
        iv = explain_point(table.rows[r], ensemble, report=reports[r])
        docs.append({"row": r, "weights": iv.to_json()})
    Path(out).write_text(json.dumps(docs, indent=2) + "\n", encoding="utf-8")
    click.echo(json.dumps({"explained": len(docs), "out": str(out)}))


@main.command("eval")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--schema", type=click.Path(exists=True), required=True)
@click.option("--scores", "scores_path", type=click.Path(exists=True), required=True)
@click.option("--pred", type=click.Path(exists=True), default=None, help="Predicted importances JSON.")
@click.option("--truth", type=click.Path(exists=True), default=None, help="Ground-truth importances JSON.")
@_common_options
@cli_errors
def eval_cmd(data, schema, scores_path, pred, truth, seed, config_path):
    """Report AUROC of scores against labels, plus mean NDCG when
    predicted and ground-truth importances are given."""
    table = load_csv(data, schema)
    if table.labels is None:
        _fail("dataset has no label column")
    with Path(scores_path).open(encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        scores = np.array([float(line[1]) for line in reader])
    if len(scores) != table.n_rows:
        _fail(f"{len(scores)} scores for {table.n_rows} rows")
    report = {"auroc": insight.auroc(scores, np.array(table.labels))}
    if pred and truth:
        pred_rows, pred_mat = sim_mod.load_truth_importances(pred, table.schema)
        truth_rows, truth_mat = sim_mod.load_truth_importances(truth, table.schema)
        pred_by_row = {r: pred_mat[i] for i, r in enumerate(pred_rows)}
        values = [
            insight.ndcg(pred_by_row[r], truth_mat[i])
            for i, r in enumerate(truth_rows)
            if r in pred_by_row
        ]
        if not values:
            _fail("no overlapping rows between predicted and truth importances")
        report["mean_ndcg"] = float(np.mean(values))
        report["explained"] = len(values)
    click.echo(json.dumps(report))


@main.group()
def rules():
    """Mine or score detection rules in batch."""


@rules.command("mine")
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--schema", type=click.Path(exists=True), required=True)
@click.option("--coverage-min", type=float, required=True)
@click.option("--purity-min", type=float, required=True)
@click.option("--max-rules", type=int, default=3, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@_common_options
@cli_errors
def rules_mine(data, schema, coverage_min, purity_min, max_rules, out, seed, config_path):
    """Mine candidate rules from the labeled anomalies of a dataset."""
    table = load_csv(data, schema)
    if table.labels is None:
        _fail("dataset has no label column")
    anomalies = [table.rows[i] for i, l in enumerate(table.labels) if l == 1]
    inliers = [table.rows[i] for i, l in enumerate(table.labels) if l == 0]
    if not anomalies:
        _fail("empty anomaly group")
    mined = rules_mod.mine_candidates(
        anomalies, inliers, table.schema, coverage_min=coverage_min, purity_min=purity_min, max_rules=max_rules
    )
    doc = {"candidates": [{"rule": r.to_json(), "score": s.to_json()} for r, s in mined]}
    if out:
        Path(out).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    click.echo(json.dumps(doc))


@rules.command("score")
@click.option("--rule", "rule_path", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--schema", type=click.Path(exists=True), required=True)
@_common_options
@cli_errors
def rules_score(rule_path, data, schema, seed, config_path):
    """Score one rule JSON against the labeled anomalies of a dataset."""
    table = load_csv(data, schema)
    rule = rules_mod.Rule.from_json(json.loads(Path(rule_path).read_text(encoding="utf-8")))
    labels = table.labels or tuple()
    anomalies = [table.rows[i] for i, l in enumerate(labels) if l == 1]
    inliers = [table.rows[i] for i, l in enumerate(labels) if l == 0]
    if not anomalies:
        _fail("empty anomaly group")
    score = rules_mod.score_rule(rule, anomalies, inliers, table.schema)
    click.echo(json.dumps({"fingerprint": dataset_fingerprint(table), **score.to_json()}))


@main.command()
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--data-dir", type=click.Path(), default=None)
@_common_options
@cli_errors
def serve(host, port, data_dir, seed, config_path):
    """Start the HTTP service."""
    from .service import serve as run_server

    cfg = load_config(config_path)
    if host is not None:
        cfg.host = host
    if port is not None:
        cfg.port = port
    if data_dir is not None:
        cfg.data_dir = data_dir
    if seed is not None:
        cfg.seed = seed
    run_server(cfg)


if __name__ == "__main__":
    main()
