"""Durable state root.

Layout makes the persistence asymmetry a filesystem fact: experiment
metadata and observations live under ``experiments/`` and survive forever;
logs live under ``clusters/<name>/logs/`` and die with the cluster.

    <root>/
      experiments/<id>/meta.json          # atomic rewrite (write + rename)
      experiments/<id>/observations.ndjson  # append + fsync, one record per line
      clusters/<name>/state.json          # owned by the provider/controller
      clusters/<name>/logs/<experiment_id>/<run_id>.<stream>  # ndjson records
      clusters/<name>/runs/...            # run records and scratch, not durable

Single writer per experiment record (the controller); concurrent readers
see a consistent prefix of the observation sequence.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import IllegalTransitionError, NotFoundError, UserError

ENV_HOME = "ORCHESTRATE_HOME"

EXPERIMENT_ACTIVE = "active"
EXPERIMENT_COMPLETED = "completed"
EXPERIMENT_DELETED = "deleted"
TERMINAL_EXPERIMENT_STATES = {EXPERIMENT_COMPLETED, EXPERIMENT_DELETED}


def default_home() -> Path:
    env = os.environ.get(ENV_HOME)
    if env:
        return Path(env)
    return Path.home() / ".orchestrate"


@dataclass
class Observation:
    """One reported result: either a finite metric value or a failure."""

    suggestion_id: str
    assignment: dict
    value: Optional[float]
    failed: bool
    run_id: str
    reported_at: float

    def __post_init__(self):
        if self.failed == (self.value is not None):
            raise ValueError("exactly one of value / failed must be set")

    def to_dict(self) -> dict:
        return {
            "suggestion_id": self.suggestion_id,
            "assignment": self.assignment,
            "value": self.value,
            "failed": self.failed,
            "run_id": self.run_id,
            "reported_at": self.reported_at,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(
            suggestion_id=d["suggestion_id"],
            assignment=d["assignment"],
            value=d["value"],
            failed=d["failed"],
            run_id=d["run_id"],
            reported_at=d["reported_at"],
        )


@dataclass
class LogRecord:
    """One captured output line; seq is per (run, stream), global_seq per experiment."""

    experiment_id: str
    run_id: str
    stream: str  # "stdout" | "stderr"
    seq: int
    timestamp: float
    line: str
    global_seq: int = -1

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "run_id": self.run_id,
            "stream": self.stream,
            "seq": self.seq,
            "timestamp": self.timestamp,
            "line": self.line,
            "global_seq": self.global_seq,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogRecord":
        return cls(
            experiment_id=d["experiment_id"],
            run_id=d["run_id"],
            stream=d["stream"],
            seq=d["seq"],
            timestamp=d["timestamp"],
            line=d["line"],
            global_seq=d.get("global_seq", -1),
        )


@dataclass
class ExperimentRecord:
    id: str
    name: str
    cluster_name: str
    space: list  # normalized parameter defs, dict form
    strategy: str
    observation_budget: int
    parallel_bandwidth: int
    resources: dict  # {"gpus": int, "cpus": int}
    run: Optional[dict]  # {"command": [...], "workdir": ..., "env": {...}, "timeout": ...}
    synthetic: Optional[dict]  # {"objective": ..., "params": {...}, "simulated_duration": ...}
    seed: int
    state: str = EXPERIMENT_ACTIVE
    created_at: float = 0.0
    closed_at: Optional[float] = None
    strategy_params: dict = field(default_factory=dict)
    observations: list = field(default_factory=list)  # list[Observation]
    best: Optional[tuple] = None  # (assignment, value)

    @property
    def observation_count(self) -> int:
        return len(self.observations)

    def meta_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "cluster_name": self.cluster_name,
            "space": self.space,
            "strategy": self.strategy,
            "observation_budget": self.observation_budget,
            "parallel_bandwidth": self.parallel_bandwidth,
            "resources": self.resources,
            "run": self.run,
            "synthetic": self.synthetic,
            "seed": self.seed,
            "state": self.state,
            "created_at": self.created_at,
            "closed_at": self.closed_at,
            "strategy_params": self.strategy_params,
        }

    @classmethod
    def from_meta(cls, d: dict) -> "ExperimentRecord":
        return cls(
            id=d["id"],
            name=d["name"],
            cluster_name=d["cluster_name"],
            space=d["space"],
            strategy=d["strategy"],
            observation_budget=d["observation_budget"],
            parallel_bandwidth=d["parallel_bandwidth"],
            resources=d["resources"],
            run=d.get("run"),
            synthetic=d.get("synthetic"),
            seed=d["seed"],
            state=d["state"],
            created_at=d["created_at"],
            closed_at=d.get("closed_at"),
            strategy_params=d.get("strategy_params", {}),
        )


@dataclass
class PurgeReport:
    logs_deleted: int
    experiments_retained: int


def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class StateRoot:
    """Filesystem-backed state; caches experiment records for the single writer."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._cache: dict[str, ExperimentRecord] = {}

    # -- layout helpers -------------------------------------------------

    @property
    def experiments_dir(self) -> Path:
        return self.path / "experiments"

    @property
    def clusters_dir(self) -> Path:
        return self.path / "clusters"

    def experiment_dir(self, experiment_id: str) -> Path:
        return self.experiments_dir / experiment_id

    def cluster_dir(self, name: str) -> Path:
        return self.clusters_dir / name

    def logs_dir(self, cluster_name: str) -> Path:
        return self.cluster_dir(cluster_name) / "logs"

    def log_path(self, cluster_name: str, experiment_id: str, run_id: str, stream: str) -> Path:
        return self.logs_dir(cluster_name) / experiment_id / f"{run_id}.{stream}"

    # -- experiments ----------------------------------------------------

    def list_experiment_ids(self) -> list[str]:
        if not self.experiments_dir.is_dir():
            return []
        return sorted(p.name for p in self.experiments_dir.iterdir() if p.is_dir())

    def create_experiment(self, record: ExperimentRecord) -> ExperimentRecord:
        d = self.experiment_dir(record.id)
        if d.exists():
            raise UserError(f"experiment {record.id} already exists")
        d.mkdir(parents=True)
        _atomic_write(d / "meta.json", json.dumps(record.meta_dict(), indent=2))
        (d / "observations.ndjson").touch()
        self._cache[record.id] = record
        return record

    def load_experiment(self, experiment_id: str) -> ExperimentRecord:
        cached = self._cache.get(experiment_id)
        if cached is not None:
            return cached
        d = self.experiment_dir(experiment_id)
        meta_path = d / "meta.json"
        if not meta_path.is_file():
            raise NotFoundError(f"experiment not found: {experiment_id}")
        record = ExperimentRecord.from_meta(json.loads(meta_path.read_text()))
        obs_path = d / "observations.ndjson"
        if obs_path.is_file():
            for line in obs_path.read_text().splitlines():
                line = line.strip()
                if not line:
                    continue
                try:
                    obs = Observation.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError):
                    # Torn tail write from a crash: keep the clean prefix.
                    break
                record.observations.append(obs)
                self._fold_best(record, obs)
        if (
            record.state == EXPERIMENT_ACTIVE
            and record.observation_count >= record.observation_budget
        ):
            record.state = EXPERIMENT_COMPLETED
        self._cache[experiment_id] = record
        return record

    @staticmethod
    def _fold_best(record: ExperimentRecord, obs: Observation) -> None:
        if obs.failed:
            return
        if record.best is None or obs.value > record.best[1]:
            record.best = (obs.assignment, obs.value)

    def record_observation(self, experiment_id: str, obs: Observation) -> ExperimentRecord:
        record = self.load_experiment(experiment_id)
        if record.state in TERMINAL_EXPERIMENT_STATES:
            raise IllegalTransitionError(
                f"experiment {experiment_id} is {record.state}; no further observations"
            )
        if record.observation_count >= record.observation_budget:
            raise IllegalTransitionError("observation budget already consumed")
        if any(o.suggestion_id == obs.suggestion_id for o in record.observations):
            raise UserError(f"duplicate suggestion_id: {obs.suggestion_id}")

        obs_path = self.experiment_dir(experiment_id) / "observations.ndjson"
        with open(obs_path, "a") as f:
            f.write(json.dumps(obs.to_dict()) + "\n")
            f.flush()
            os.fsync(f.fileno())
        record.observations.append(obs)
        self._fold_best(record, obs)
        if record.observation_count >= record.observation_budget:
            self._close(record, EXPERIMENT_COMPLETED, obs.reported_at)
        return record

    def mark_completed(self, experiment_id: str, at: float) -> ExperimentRecord:
        record = self.load_experiment(experiment_id)
        if record.state == EXPERIMENT_ACTIVE:
            self._close(record, EXPERIMENT_COMPLETED, at)
        return record

    def mark_deleted(self, experiment_id: str, at: float) -> ExperimentRecord:
        record = self.load_experiment(experiment_id)
        if record.state == EXPERIMENT_ACTIVE:
            self._close(record, EXPERIMENT_DELETED, at)
        return record

    def _close(self, record: ExperimentRecord, state: str, at: float) -> None:
        record.state = state
        record.closed_at = at
        self.save_experiment_meta(record)

    def save_experiment_meta(self, record: ExperimentRecord) -> None:
        d = self.experiment_dir(record.id)
        _atomic_write(d / "meta.json", json.dumps(record.meta_dict(), indent=2))

    # -- logs -------------------------------------------------------------

    def append_log(self, cluster_name: str, record: LogRecord) -> None:
        path = self.log_path(cluster_name, record.experiment_id, record.run_id, record.stream)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a") as f:
            f.write(json.dumps(record.to_dict()) + "\n")

    def read_logs(self, cluster_name: str, experiment_id: str) -> list[LogRecord]:
        """All stored records for one experiment, merged by (timestamp, run, seq)."""
        d = self.logs_dir(cluster_name) / experiment_id
        records: list[LogRecord] = []
        if d.is_dir():
            for path in d.iterdir():
                for line in path.read_text().splitlines():
                    line = line.strip()
                    if line:
                        records.append(LogRecord.from_dict(json.loads(line)))
        records.sort(key=lambda r: (r.timestamp, r.run_id, r.stream, r.seq))
        return records

    def count_logs(self, cluster_name: str) -> int:
        base = self.logs_dir(cluster_name)
        total = 0
        if base.is_dir():
            for path in base.rglob("*"):
                if path.is_file():
                    total += sum(1 for line in path.read_text().splitlines() if line.strip())
        return total

    # -- cluster teardown ---------------------------------------------------

    def experiments_on_cluster(self, cluster_name: str) -> list[ExperimentRecord]:
        out = []
        for eid in self.list_experiment_ids():
            record = self.load_experiment(eid)
            if record.cluster_name == cluster_name:
                out.append(record)
        return out

    def purge_cluster_artifacts(self, cluster_name: str, at: float) -> PurgeReport:
        """Delete the cluster's logs; retain every experiment record.

        Active experiments on the cluster are transitioned to deleted: their
        execution substrate is gone.
        """
        if not self.cluster_dir(cluster_name).is_dir():
            raise NotFoundError(f"cluster not found: {cluster_name}")
        logs_deleted = self.count_logs(cluster_name)
        base = self.logs_dir(cluster_name)
        if base.is_dir():
            import shutil

            shutil.rmtree(base)
        experiments = self.experiments_on_cluster(cluster_name)
        for record in experiments:
            if record.state == EXPERIMENT_ACTIVE:
                self.mark_deleted(record.id, at)
        return PurgeReport(logs_deleted=logs_deleted, experiments_retained=len(experiments))


def init_home(path: Path | str) -> StateRoot:
    """Create (or open) a state root directory. Idempotent."""
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise UserError(f"not a directory: {path}")
    try:
        (path / "experiments").mkdir(parents=True, exist_ok=True)
        (path / "clusters").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UserError(f"cannot initialize state root at {path}: {e}") from e
    return StateRoot(path)
