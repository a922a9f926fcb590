"""HTTP JSON service exposing the detection/explanation/rule pipeline.

Every route is a thin adapter over the library: the JSON it returns is the
corresponding library call's result on identical inputs. Run state lives
in memory with fitted ensembles spilled to disk so a restarted process can
reload finished runs. Datasets are immutable once uploaded; only the rule
database and per-run caches are written.
"""

from __future__ import annotations

import json
import threading
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, HTTPException, UploadFile
from pydantic import BaseModel

from . import detector, insight, rules as rules_mod
from .config import ServiceConfig
from .dataio import DataError, DatasetTable, dataset_fingerprint, load_csv
from .detector import DetectorParams
from .explain import ImportanceVector, explain_batch

RUN_STATUSES = ("pending", "running", "done", "error")


class RunRequest(BaseModel):
    dataset_id: str
    params: dict = {}


class LabelsRequest(BaseModel):
    rows: list[int]


class CandidatesRequest(BaseModel):
    cluster_id: int | None = None
    coverage_min: float
    purity_min: float


class RuleScoreRequest(BaseModel):
    rule: dict
    cluster_id: int | None = None


class SaveRuleRequest(BaseModel):
    rule: dict
    run_id: str
    cluster_id: int | None = None


@dataclass
class RunState:
    run_id: str
    dataset_id: str
    params: DetectorParams
    status: str = "pending"
    error: str = ""
    ensemble: detector.ChainEnsemble | None = None
    scores: np.ndarray | None = None
    imported_rows: tuple[int, ...] | None = None
    summary_cache: dict = field(default_factory=dict)   # k -> SummaryLayout
    lookout_cache: dict = field(default_factory=dict)   # budget -> LookoutSelection
    explain_cache: dict = field(default_factory=dict)   # row -> ImportanceVector
    last_clusters: int | None = None
    lock: threading.RLock = field(default_factory=threading.RLock)


class Store:
    """All server-side state plus its disk spill."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        config.ensure_dirs()
        self.root = Path(config.data_dir)
        self.datasets: dict[str, DatasetTable] = {}
        self.runs: dict[str, RunState] = {}
        self.rule_db = rules_mod.RuleDB(config.rule_db_path)
        self._counter_lock = threading.Lock()
        self._run_counter = 0
        self._reload()

    # -- persistence -------------------------------------------------------

    def _reload(self) -> None:
        for ds_dir in sorted((self.root / "datasets").glob("*")):
            csv_path, schema_path = ds_dir / "data.csv", ds_dir / "schema.json"
            if csv_path.exists() and schema_path.exists():
                table = load_csv(csv_path, schema_path, drop_constant=False)
                self.datasets[ds_dir.name] = table
        for run_dir in sorted((self.root / "runs").glob("*")):
            manifest = run_dir / "run.json"
            if not manifest.exists():
                continue
            doc = json.loads(manifest.read_text(encoding="utf-8"))
            if doc["dataset_id"] not in self.datasets:
                continue
            run = RunState(
                run_id=doc["run_id"],
                dataset_id=doc["dataset_id"],
                params=DetectorParams.from_json(doc["params"]),
                status="done",
                scores=np.array(doc["scores"]),
                ensemble=detector.load_ensemble(run_dir / "ensemble.json"),
            )
            self.runs[run.run_id] = run
            self._run_counter = max(self._run_counter, int(doc["run_id"].split("-")[-1]))

    def add_dataset(self, table: DatasetTable, csv_bytes: bytes, schema_bytes: bytes) -> str:
        ds_id = dataset_fingerprint(table)
        if ds_id not in self.datasets:
            ds_dir = self.root / "datasets" / ds_id
            ds_dir.mkdir(parents=True, exist_ok=True)
            (ds_dir / "data.csv").write_bytes(csv_bytes)
            (ds_dir / "schema.json").write_bytes(schema_bytes)
            self.datasets[ds_id] = table
        return ds_id

    def new_run(self, dataset_id: str, params: DetectorParams) -> RunState:
        with self._counter_lock:
            self._run_counter += 1
            run = RunState(run_id=f"run-{self._run_counter:04d}", dataset_id=dataset_id, params=params)
            self.runs[run.run_id] = run
        return run

    def spill_run(self, run: RunState) -> None:
        run_dir = self.root / "runs" / run.run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        detector.save_ensemble(run.ensemble, run_dir / "ensemble.json")
        (run_dir / "run.json").write_text(
            json.dumps(
                {
                    "run_id": run.run_id,
                    "dataset_id": run.dataset_id,
                    "params": run.params.to_json(),
                    "scores": [float(s) for s in run.scores],
                }
            ),
            encoding="utf-8",
        )

    # -- derived views -----------------------------------------------------

    def table(self, run: RunState) -> DatasetTable:
        return self.datasets[run.dataset_id]

    def selection(self, run: RunState) -> list[int]:
        """Anomaly rows under inspection: analyst-imported if set, else the
        lowest-scoring top_k."""
        if run.imported_rows is not None:
            return list(run.imported_rows)
        k = min(self.config.top_k, len(run.scores))
        return [int(i) for i in np.argsort(run.scores, kind="stable")[:k]]

    def importances_for(self, run: RunState, rows: list[int]) -> list[ImportanceVector]:
        table = self.table(run)
        missing = [r for r in rows if r not in run.explain_cache]
        if missing:
            sub = table.subset(missing)
            for r, iv in zip(missing, explain_batch(sub, run.ensemble)):
                run.explain_cache[r] = iv
        return [run.explain_cache[r] for r in rows]

    def summary(self, run: RunState, k: int) -> insight.SummaryLayout:
        layout = run.summary_cache.get(k)
        if layout is None:
            rows = self.selection(run)
            if not rows:
                raise HTTPException(status_code=422, detail="run has no anomalies selected")
            importances = self.importances_for(run, rows)
            layout = insight.build_summary(rows, importances, run.scores[rows], k)
            run.summary_cache[k] = layout
        run.last_clusters = k
        return layout

    def cluster_rows(self, run: RunState, cluster_id: int | None) -> list[int]:
        rows = self.selection(run)
        if cluster_id is None:
            return rows
        k = run.last_clusters or self.config.default_clusters
        layout = self.summary(run, k)
        if not 0 <= cluster_id < k:
            raise HTTPException(status_code=422, detail=f"cluster_id {cluster_id} out of range [0, {k})")
        return [r for r, c in zip(layout.rows, layout.cluster_ids) if int(c) == cluster_id]


def _run_or_404(store: Store, run_id: str) -> RunState:
    run = store.runs.get(run_id)
    if run is None:
        raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
    return run


def _ready_run(store: Store, run_id: str) -> RunState:
    run = _run_or_404(store, run_id)
    if run.status != "done":
        raise HTTPException(status_code=409, detail=f"run {run_id!r} is {run.status}")
    return run


def _parse_rule(doc: dict) -> rules_mod.Rule:
    try:
        return rules_mod.Rule.from_json(doc)
    except (DataError, KeyError, TypeError) as exc:
        raise HTTPException(status_code=422, detail=f"invalid rule: {exc}") from exc


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="anomkit service")
    store = Store(config)
    app.state.store = store

    @app.post("/datasets")
    async def upload_dataset(data: UploadFile = File(...), schema_file: UploadFile = File(..., alias="schema")):
        csv_bytes = await data.read()
        schema_bytes = await schema_file.read()
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            csv_path = Path(tmp) / "data.csv"
            schema_path = Path(tmp) / "schema.json"
            csv_path.write_bytes(csv_bytes)
            schema_path.write_bytes(schema_bytes)
            try:
                table = load_csv(csv_path, schema_path, drop_constant=False)
            except DataError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        ds_id = store.add_dataset(table, csv_bytes, schema_bytes)
        return {"dataset_id": ds_id, "rows": table.n_rows}

    @app.post("/runs")
    def create_run(req: RunRequest):
        if req.dataset_id not in store.datasets:
            raise HTTPException(status_code=404, detail=f"unknown dataset {req.dataset_id!r}")
        defaults = DetectorParams(
            n_chains=config.n_chains,
            depth=config.depth,
            projection_dims=config.projection_dims,
            counter=config.counter,
            seed=config.seed,
        )
        try:
            params = DetectorParams.from_json({**defaults.to_json(), **req.params})
        except TypeError as exc:
            raise HTTPException(status_code=422, detail=f"invalid detector params: {exc}") from exc
        run = store.new_run(req.dataset_id, params)

        def job():
            run.status = "running"
            try:
                table = store.table(run)
                run.ensemble = detector.fit(table, params)
                run.scores = detector.final_scores(detector.score_batch(table, run.ensemble))
                store.spill_run(run)
                run.status = "done"
            except Exception as exc:  # surfaced via GET /runs/{id}
                run.status = "error"
                run.error = f"{exc}\n{traceback.format_exc()}"

        threading.Thread(target=job, daemon=True).start()
        return {"run_id": run.run_id}

    @app.get("/runs/{run_id}")
    def run_status(run_id: str):
        run = _run_or_404(store, run_id)
        doc = {"run_id": run.run_id, "status": run.status, "dataset_id": run.dataset_id}
        if run.status == "error":
            doc["error"] = run.error.splitlines()[0] if run.error else "unknown"
        return doc

    @app.get("/runs/{run_id}/anomalies")
    def top_anomalies(run_id: str, top: int = 0):
        run = _ready_run(store, run_id)
        with run.lock:
            k = top or min(config.top_k, len(run.scores))
            order = [int(i) for i in np.argsort(run.scores, kind="stable")[:k]]
            importances = store.importances_for(run, order)
            return {
                "anomalies": [
                    {"row": r, "score": float(run.scores[r]), "importances": iv.to_json()}
                    for r, iv in zip(order, importances)
                ]
            }

    @app.post("/runs/{run_id}/labels")
    def import_labels(run_id: str, req: LabelsRequest):
        run = _ready_run(store, run_id)
        table = store.table(run)
        bad = [r for r in req.rows if not 0 <= r < table.n_rows]
        if bad:
            raise HTTPException(status_code=422, detail=f"row indices out of range: {bad}")
        with run.lock:
            run.imported_rows = tuple(dict.fromkeys(req.rows))  # dedupe, keep order
            run.summary_cache.clear()
            run.lookout_cache.clear()
            run.last_clusters = None
        return {"run_id": run_id, "selected": len(run.imported_rows)}

    @app.get("/runs/{run_id}/summary")
    def summary(run_id: str, clusters: int):
        run = _ready_run(store, run_id)
        with run.lock:
            rows = store.selection(run)
            if clusters < 1 or clusters > max(len(rows), 1):
                raise HTTPException(status_code=422, detail=f"clusters {clusters} out of range [1, {len(rows)}]")
            return store.summary(run, clusters).to_json()

    @app.get("/runs/{run_id}/explore/histogram")
    def histogram(run_id: str, feature: str):
        run = _ready_run(store, run_id)
        table = store.table(run)
        try:
            col = table.column(feature)
        except DataError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        with run.lock:
            selected = set(store.selection(run))
        return {
            "feature": feature,
            "anomalies": [col[i] for i in range(table.n_rows) if i in selected],
            "inliers": [col[i] for i in range(table.n_rows) if i not in selected],
        }

    @app.get("/runs/{run_id}/explore/density")
    def density(run_id: str, fx: str, fy: str):
        run = _ready_run(store, run_id)
        table = store.table(run)
        try:
            cx, cy = table.column(fx), table.column(fy)
        except DataError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        with run.lock:
            selected = set(store.selection(run))
        return {
            "fx": fx,
            "fy": fy,
            "anomalies": [[cx[i], cy[i]] for i in range(table.n_rows) if i in selected],
            "inliers": [[cx[i], cy[i]] for i in range(table.n_rows) if i not in selected],
        }

    @app.get("/runs/{run_id}/explore/parallel")
    def parallel(run_id: str, features: str):
        run = _ready_run(store, run_id)
        table = store.table(run)
        names = [n for n in features.split(",") if n]
        try:
            cols = [table.column(n) for n in names]
        except DataError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        with run.lock:
            selected = set(store.selection(run))
        return {
            "features": names,
            "anomalies": [[c[i] for c in cols] for i in range(table.n_rows) if i in selected],
            "inliers": [[c[i] for c in cols] for i in range(table.n_rows) if i not in selected],
        }

    @app.get("/runs/{run_id}/explore/lookout")
    def lookout(run_id: str, budget: int):
        run = _ready_run(store, run_id)
        with run.lock:
            sel = run.lookout_cache.get(budget)
            if sel is None:
                table = store.table(run)
                rows = store.selection(run)
                inlier_rows = [i for i in range(table.n_rows) if i not in set(rows)]
                try:
                    sel = insight.lookout_select(
                        table.subset(rows), table.subset(inlier_rows), budget, seed=config.seed
                    )
                except ValueError as exc:
                    raise HTTPException(status_code=422, detail=str(exc)) from exc
                run.lookout_cache[budget] = sel
            return sel.to_json()

    @app.post("/runs/{run_id}/rules/candidates")
    def rule_candidates(run_id: str, req: CandidatesRequest):
        run = _ready_run(store, run_id)
        table = store.table(run)
        with run.lock:
            rows = store.cluster_rows(run, req.cluster_id)
            if not rows:
                raise HTTPException(status_code=422, detail="empty anomaly group")
            inliers = [table.rows[i] for i in range(table.n_rows) if i not in set(store.selection(run))]
            try:
                mined = rules_mod.mine_candidates(
                    [table.rows[i] for i in rows],
                    inliers,
                    table.schema,
                    coverage_min=req.coverage_min,
                    purity_min=req.purity_min,
                )
            except DataError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        return {
            "candidates": [
                {"rule": rule.to_json(), "score": score.to_json()} for rule, score in mined
            ]
        }

    @app.post("/runs/{run_id}/rules/score")
    def rule_score(run_id: str, req: RuleScoreRequest):
        run = _ready_run(store, run_id)
        rule = _parse_rule(req.rule)
        table = store.table(run)
        with run.lock:
            rows = store.cluster_rows(run, req.cluster_id)
            if not rows:
                raise HTTPException(status_code=422, detail="empty anomaly group")
            inliers = [table.rows[i] for i in range(table.n_rows) if i not in set(store.selection(run))]
            try:
                score = rules_mod.score_rule(rule, [table.rows[i] for i in rows], inliers, table.schema)
            except DataError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        return score.to_json()

    @app.post("/rules")
    def save_rule(req: SaveRuleRequest):
        run = _ready_run(store, req.run_id)
        rule = _parse_rule(req.rule)
        table = store.table(run)
        with run.lock:
            rows = store.cluster_rows(run, req.cluster_id)
            if not rows:
                raise HTTPException(status_code=422, detail="empty anomaly group")
            inliers = [table.rows[i] for i in range(table.n_rows) if i not in set(store.selection(run))]
            score = rules_mod.score_rule(rule, [table.rows[i] for i in rows], inliers, table.schema)
        record = store.rule_db.save_rule(rule, score, dataset_fingerprint(table))
        return record

    @app.get("/rules")
    def list_rules():
        return {"rules": store.rule_db.list_rules()}

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="warning")
