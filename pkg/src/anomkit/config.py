"""Service and CLI configuration: key=value file plus ALARM_-prefixed
environment overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "ALARM_"


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    data_dir: str = "anomkit-data"
    rule_db: str = ""              # defaults to <data_dir>/rules.jsonl
    n_chains: int = 200
    depth: int = 20
    projection_dims: int | None = None
    counter: str = "exact"
    seed: int = 0
    simulator_preset: str = "desk"
    top_k: int = 50
    default_clusters: int = 3

    @property
    def rule_db_path(self) -> Path:
        return Path(self.rule_db) if self.rule_db else Path(self.data_dir) / "rules.jsonl"

    def ensure_dirs(self) -> None:
        root = Path(self.data_dir)
        for sub in ("datasets", "runs"):
            (root / sub).mkdir(parents=True, exist_ok=True)
        self.rule_db_path.parent.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()


def _coerce(name: str, raw: str):
    field_types = {f.name: f.type for f in fields(ServiceConfig)}
    t = field_types[name]
    if t == "int":
        return int(raw)
    if t == "int | None":
        return None if raw.lower() in ("", "none", "null") else int(raw)
    return raw


def load_config(path: str | Path | None = None, env: dict | None = None) -> ServiceConfig:
    """Build a ServiceConfig from an optional key=value file, then apply
    ALARM_<KEY> environment overrides."""
    cfg = ServiceConfig()
    known = {f.name for f in fields(ServiceConfig)}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip().lower()
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, value.strip()))
    env = os.environ if env is None else env
    for key in known:
        raw = env.get(ENV_PREFIX + key.upper())
        if raw is not None:
            setattr(cfg, key, _coerce(key, raw))
    return cfg
