"""Per-cluster controller: owns scheduling, suggestion issuance, and events.

One controller process per cluster. All scheduler/optimizer state is
mutated under a single lock (the serialized decision loop); executor
threads run concurrently and report back through ``_on_run_complete``.
HTTP exposure lives in ``httpapi``; this module is fully usable in-process,
which is how most tests drive it.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

from . import executor, optimizer, scheduler
from .errors import (
    NoMoreSuggestions,
    NotFoundError,
    OrchestrateError,
    UserError,
    ValidationError,
)
from .ids import new_id
from .provider import Provider, ResourceRequest, cluster_totals
from .scheduler import (
    LIVE_RUN_STATES,
    RUN_FAILED,
    RUN_KILLED,
    RUN_QUEUED,
    RUN_RUNNING,
    RUN_SCHEDULED,
    RUN_SUCCEEDED,
    RunRecord,
)
from .store import (
    EXPERIMENT_ACTIVE,
    ExperimentRecord,
    LogRecord,
    Observation,
    StateRoot,
)

RUN_STATES = (RUN_QUEUED, RUN_SCHEDULED, RUN_RUNNING, RUN_SUCCEEDED, RUN_FAILED, RUN_KILLED)


@dataclass
class ControllerConfig:
    grace_period: float = 5.0
    idle_timeout: float = 30.0
    autoscale_interval: float = 1.0
    host: str = "127.0.0.1"
    port: int = 0


@dataclass
class ExperimentRuntime:
    record: ExperimentRecord
    space: optimizer.ParameterSpace
    strategy_state: optimizer.StrategyState
    runs: dict = field(default_factory=dict)  # run_id -> RunRecord
    run_order: list = field(default_factory=list)
    log_next_seq: int = 0
    log_subscribers: list = field(default_factory=list)  # list[queue.Queue]

    def live_runs(self) -> list[RunRecord]:
        return [r for r in self.runs.values() if r.is_live]

    def runs_by_state(self) -> dict:
        counts = {s: 0 for s in RUN_STATES}
        for r in self.runs.values():
            counts[r.state] += 1
        return counts


class _SyntheticHandle:
    """Stands in for a ProcessHandle when running a built-in objective."""

    def __init__(self):
        self.killed = threading.Event()

    def kill(self, grace_period: float = 0.0) -> None:
        self.killed.set()


class Controller:
    def __init__(self, root: StateRoot, cluster_name: str, config: Optional[ControllerConfig] = None):
        self.root = root
        self.config = config or ControllerConfig()
        self.provider = Provider(root)
        self.cluster = self.provider.load_cluster(cluster_name)
        self.started_at = time.time()

        self._lock = threading.RLock()
        self._log_lock = threading.Lock()
        self._stopping = False
        self.experiments: dict[str, ExperimentRuntime] = {}
        self.experiment_order: list[str] = []
        self._handles: dict[str, object] = {}  # run_id -> handle
        self._run_threads: list[threading.Thread] = []
        self._events: list[dict] = []
        self._event_cond = threading.Condition(self._lock)
        self._autoscale_thread: Optional[threading.Thread] = None

        # Experiments that already lived on this cluster become visible for
        # status queries (with empty run tables) after a controller restart.
        for record in root.experiments_on_cluster(cluster_name):
            self._adopt(record)

    # -- lifecycle -----------------------------------------------------------

    def start_autoscaler(self) -> None:
        if self._autoscale_thread:
            return
        t = threading.Thread(target=self._autoscale_loop, daemon=True)
        self._autoscale_thread = t
        t.start()

    def _autoscale_loop(self) -> None:
        while not self._stopping:
            time.sleep(self.config.autoscale_interval)
            try:
                self.autoscale_once()
            except OrchestrateError:
                pass

    def autoscale_once(self, now: Optional[float] = None) -> list:
        with self._lock:
            if self._stopping:
                return []
            now = now if now is not None else time.time()
            queued = self._queued_runs()
            requests = scheduler.autoscale_tick(
                self.cluster, queued, now, self.config.idle_timeout
            )
            for req in requests:
                pool = self.cluster.pool(req.pool_kind)
                try:
                    self.provider.scale_pool(self.cluster, req.pool_kind,
                                             len(pool.nodes) + req.delta)
                except UserError:
                    continue  # busy node blocked a shrink; try again next tick
            if requests:
                self._schedule()
            return requests

    def shutdown(self) -> None:
        """Kill everything in flight and flush state. Safe to call twice."""
        with self._lock:
            if self._stopping:
                return
            self._stopping = True
            handles = self._kill_live_runs_locked(None)
        for handle in handles:
            handle.kill(self.config.grace_period)
        deadline = time.time() + 2 * self.config.grace_period + 5
        for t in list(self._run_threads):
            t.join(timeout=max(0.0, deadline - time.time()))
        with self._lock:
            self.cluster.controller_endpoint = None
            self.cluster.controller_pid = None
            self.provider.save_cluster(self.cluster)
            self._event_cond.notify_all()
            for rt in self.experiments.values():
                self._notify_log_subscribers(rt, None)

    # -- experiment lifecycle ---------------------------------------------------

    def _adopt(self, record: ExperimentRecord) -> ExperimentRuntime:
        space = optimizer.validate_space(record.space)
        rt = ExperimentRuntime(
            record=record,
            space=space,
            strategy_state=optimizer.make_strategy_state(record, space),
        )
        logs_dir = self.root.logs_dir(self.cluster.name) / record.id
        if logs_dir.is_dir():
            rt.log_next_seq = sum(
                len(p.read_text().splitlines()) for p in logs_dir.iterdir() if p.is_file()
            )
        self.experiments[record.id] = rt
        self.experiment_order.append(record.id)
        return rt

    def create_experiment(self, config: dict) -> str:
        record = parse_experiment_config(config, cluster_name=self.cluster.name)
        request = ResourceRequest(
            gpus=int(record.resources.get("gpus", 0)),
            cpus=int(record.resources.get("cpus", 1)),
        )
        with self._lock:
            if self._stopping:
                raise UserError("controller is shutting down")
            scheduler.validate_request(request, self.cluster)
            self.root.create_experiment(record)
            rt = self._adopt(record)
            self._emit("experiment_created", record.id, {"name": record.name})
            self._fill_bandwidth(rt)
            self._schedule()
        return record.id

    def _fill_bandwidth(self, rt: ExperimentRuntime) -> None:
        record = rt.record
        while (
            record.state == EXPERIMENT_ACTIVE
            and not self._stopping
            and len(rt.live_runs()) < record.parallel_bandwidth
        ):
            try:
                suggestion = optimizer.suggest(rt.strategy_state)
            except NoMoreSuggestions:
                break
            self._submit_run(rt, suggestion)

    def _submit_run(self, rt: ExperimentRuntime, suggestion: optimizer.Suggestion) -> RunRecord:
        record = rt.record
        if len(rt.live_runs()) >= record.parallel_bandwidth:
            raise OrchestrateError("controller bug: bandwidth oversubmission")
        run = RunRecord(
            run_id=new_id("r-"),
            experiment_id=record.id,
            suggestion_id=suggestion.suggestion_id,
            assignment=suggestion.assignment,
            request=ResourceRequest(
                gpus=int(record.resources.get("gpus", 0)),
                cpus=int(record.resources.get("cpus", 1)),
            ),
            created_at=time.time(),
        )
        rt.runs[run.run_id] = run
        rt.run_order.append(run.run_id)
        self._persist_run(run)
        self._emit("run_state", record.id, {"run_id": run.run_id, "state": run.state})
        return run

    # -- scheduling -----------------------------------------------------------

    def _queued_runs(self) -> list[RunRecord]:
        out = []
        for eid in self.experiment_order:
            rt = self.experiments[eid]
            out.extend(rt.runs[rid] for rid in rt.run_order if rt.runs[rid].state == RUN_QUEUED)
        return out

    def _schedule(self) -> None:
        assignments = scheduler.place_queued(
            self.cluster, self._queued_runs(), self.experiment_order
        )
        started: list[tuple[ExperimentRuntime, RunRecord]] = []
        for a in assignments:
            node = self.cluster.find_node(a.node_id)
            rt = None
            for eid in self.experiment_order:
                if a.run_id in self.experiments[eid].runs:
                    rt = self.experiments[eid]
                    break
            run = rt.runs[a.run_id]
            runs_on_node = [
                r
                for e in self.experiments.values()
                for r in e.runs.values()
                if r.node_id == node.id and r.is_live
            ]
            run.gpu_slots = scheduler.pick_gpu_slots(node, runs_on_node, run.request.gpus)
            node.allocate(run.run_id, run.request)
            run.node_id = node.id
            run.transition(RUN_SCHEDULED)
            self._persist_run(run)
            self._emit("run_state", run.experiment_id, {"run_id": run.run_id, "state": run.state})
            started.append((rt, run))
        if started:
            self.provider.save_cluster(self.cluster)
        for rt, run in started:
            t = threading.Thread(target=self._run_thread, args=(rt, run), daemon=True)
            self._run_threads.append(t)
            t.start()

    def _scratch_dir(self, run: RunRecord) -> Path:
        return self.root.cluster_dir(self.cluster.name) / "runs" / run.run_id

    def _persist_run(self, run: RunRecord) -> None:
        path = self.root.cluster_dir(self.cluster.name) / "runs" / f"{run.run_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(run.to_dict(), indent=2))

    def _run_thread(self, rt: ExperimentRuntime, run: RunRecord) -> None:
        record = rt.record
        # The handle is registered under the lock, in the same critical section
        # as the running transition: a concurrent stop either sees the run as
        # scheduled (and kills it in place) or finds a killable handle.
        with self._lock:
            if run.state != RUN_SCHEDULED:
                return  # killed before launch
            if record.synthetic is not None:
                handle = _SyntheticHandle()
            else:
                spec = executor.RunSpec(
                    command=record.run["command"],
                    workdir=record.run.get("workdir"),
                    env=record.run.get("env", {}),
                    resources=run.request,
                    timeout=record.run.get("timeout"),
                )

                def sink(stream: str, seq: int, ts: float, line: str) -> None:
                    self._append_log(rt, run.run_id, stream, seq, ts, line)

                try:
                    handle = executor.launch(
                        run.run_id,
                        record.id,
                        run.assignment,
                        spec,
                        run.gpu_slots,
                        self._scratch_dir(run),
                        sink,
                    )
                except UserError as e:
                    # Spawn failure: scheduled -> failed directly.
                    self._on_run_complete(
                        run,
                        executor.Outcome(executor.DISPOSITION_FAILED, reason=str(e)),
                    )
                    return
            self._handles[run.run_id] = handle
            run.transition(RUN_RUNNING)
            self._persist_run(run)
            self._emit("run_state", record.id, {"run_id": run.run_id, "state": run.state})

        if record.synthetic is not None:
            duration = float(record.synthetic.get("simulated_duration", 0.0))
            killed = handle.killed.wait(timeout=duration) if duration > 0 else handle.killed.is_set()
            if killed:
                outcome = executor.Outcome(executor.DISPOSITION_KILLED, reason="killed")
            else:
                try:
                    outcome = executor.synthetic_execute(
                        run.assignment,
                        record.synthetic["objective"],
                        record.synthetic.get("params"),
                    )
                except UserError as e:
                    outcome = executor.Outcome(executor.DISPOSITION_FAILED, reason=str(e))
            outcome.duration = duration
        else:
            outcome = executor.collect(handle, self.config.grace_period)
        self._on_run_complete(run, outcome)

    # -- completion -----------------------------------------------------------

    def _on_run_complete(self, run: RunRecord, outcome: executor.Outcome) -> None:
        with self._lock:
            self._handles.pop(run.run_id, None)
            if run.state in scheduler.TERMINAL_RUN_STATES:
                return
            rt = self.experiments[run.experiment_id]
            record = rt.record
            if run.node_id is not None:
                node = self.cluster.find_node(run.node_id)
                node.release(run.run_id, run.request, time.time())
            final = {
                executor.DISPOSITION_SUCCEEDED: RUN_SUCCEEDED,
                executor.DISPOSITION_FAILED: RUN_FAILED,
                executor.DISPOSITION_KILLED: RUN_KILLED,
            }[outcome.disposition]
            run.transition(final)
            run.value = outcome.value
            run.reason = outcome.reason
            run.exit_code = outcome.exit_code
            self._persist_run(run)
            self.provider.save_cluster(self.cluster)
            self._emit(
                "run_state",
                record.id,
                {"run_id": run.run_id, "state": run.state, "value": run.value,
                 "reason": run.reason},
            )

            if final == RUN_KILLED:
                optimizer.close_killed(rt.strategy_state, run.suggestion_id)
            elif record.state == EXPERIMENT_ACTIVE:
                obs = Observation(
                    suggestion_id=run.suggestion_id,
                    assignment=run.assignment,
                    value=outcome.value if final == RUN_SUCCEEDED else None,
                    failed=final == RUN_FAILED,
                    run_id=run.run_id,
                    reported_at=time.time(),
                )
                self.root.record_observation(record.id, obs)
                optimizer.ingest_observation(rt.strategy_state, obs)
                self._emit(
                    "observation",
                    record.id,
                    {
                        "value": obs.value,
                        "failed": obs.failed,
                        "count": record.observation_count,
                        "best": record.best[1] if record.best else None,
                    },
                )
                if record.state != EXPERIMENT_ACTIVE:
                    self._finish_experiment(rt)
            else:
                optimizer.close_killed(rt.strategy_state, run.suggestion_id)

            if record.state == EXPERIMENT_ACTIVE and not self._stopping:
                self._fill_bandwidth(rt)
                # Grid exhaustion: nothing issuable, nothing in flight.
                if not rt.live_runs() and not rt.strategy_state.open:
                    try:
                        optimizer.suggest(rt.strategy_state)
                    except NoMoreSuggestions:
                        self.root.mark_completed(record.id, time.time())
                        self._finish_experiment(rt)
                    else:
                        raise OrchestrateError("controller bug: issued probe suggestion")
            if not self._stopping:
                self._schedule()

    def _finish_experiment(self, rt: ExperimentRuntime) -> None:
        self._emit("experiment_state", rt.record.id, {"state": rt.record.state})
        if not rt.live_runs():
            self._notify_log_subscribers(rt, None)

    # -- stop / kill ---------------------------------------------------------------

    def _kill_live_runs_locked(self, experiment_id: Optional[str]) -> list:
        """Kill queued/scheduled runs in place; return handles of running ones."""
        handles = []
        killed_now = 0
        for eid in self.experiment_order:
            if experiment_id is not None and eid != experiment_id:
                continue
            rt = self.experiments[eid]
            for run in rt.runs.values():
                if run.state in (RUN_QUEUED, RUN_SCHEDULED):
                    if run.node_id is not None:
                        self.cluster.find_node(run.node_id).release(
                            run.run_id, run.request, time.time()
                        )
                    run.transition(RUN_KILLED)
                    run.reason = "killed"
                    optimizer.close_killed(rt.strategy_state, run.suggestion_id)
                    self._persist_run(run)
                    self._emit("run_state", eid, {"run_id": run.run_id, "state": run.state})
                    killed_now += 1
                elif run.state == RUN_RUNNING:
                    handle = self._handles.get(run.run_id)
                    if handle is not None:
                        handles.append(handle)
        self.provider.save_cluster(self.cluster)
        return handles

    def stop_experiment(self, experiment_id: str) -> dict:
        """Kill all execution for the experiment and mark it deleted. Idempotent."""
        with self._lock:
            rt = self._runtime(experiment_id)
            record = rt.record
            live_before = len(rt.live_runs())
            if record.state == EXPERIMENT_ACTIVE:
                self.root.mark_deleted(experiment_id, time.time())
                self._emit("experiment_state", experiment_id, {"state": record.state})
            handles = self._kill_live_runs_locked(experiment_id)
            status = self._status_locked(rt)
            status["killed"] = live_before
        for handle in handles:
            handle.kill(self.config.grace_period)
        with self._lock:
            if not rt.live_runs():
                self._notify_log_subscribers(rt, None)
            self._schedule()
        return status

    # -- status -----------------------------------------------------------------

    def _runtime(self, experiment_id: str) -> ExperimentRuntime:
        rt = self.experiments.get(experiment_id)
        if rt is None:
            raise NotFoundError(f"experiment not found: {experiment_id}")
        return rt

    def _status_locked(self, rt: ExperimentRuntime) -> dict:
        record = rt.record
        successes = sum(1 for o in record.observations if not o.failed)
        failures = sum(1 for o in record.observations if o.failed)
        runs_table = [
            {
                "run_id": rid,
                "state": rt.runs[rid].state,
                "node_id": rt.runs[rid].node_id,
                "duration": rt.runs[rid].duration(),
            }
            for rid in rt.run_order
        ]
        return {
            "id": record.id,
            "name": record.name,
            "state": record.state,
            "strategy": record.strategy,
            "budget": {
                "completed": successes,
                "failed": failures,
                "total": record.observation_budget,
            },
            "runs_by_state": rt.runs_by_state(),
            "best": (
                {"assignment": record.best[0], "value": record.best[1]} if record.best else None
            ),
            "runs": runs_table,
            "observations": [o.to_dict() for o in record.observations],
        }

    def get_status(self, experiment_id: str) -> dict:
        with self._lock:
            return self._status_locked(self._runtime(experiment_id))

    def list_experiments(self) -> list[dict]:
        with self._lock:
            out = []
            for eid in self.experiment_order:
                status = self._status_locked(self.experiments[eid])
                status.pop("runs")
                status.pop("observations")
                out.append(status)
            return out

    def cluster_status(self) -> dict:
        with self._lock:
            pools = []
            for pool in self.cluster.pools:
                pools.append(
                    {
                        "pool_kind": pool.pool_kind,
                        "instance_type": pool.instance_type,
                        "min_nodes": pool.min_nodes,
                        "max_nodes": pool.max_nodes,
                        "nodes": [n.to_dict() for n in pool.nodes],
                    }
                )
            return {
                "name": self.cluster.name,
                "pools": pools,
                "totals": cluster_totals(self.cluster),
                "controller_uptime": time.time() - self.started_at,
            }

    # -- events --------------------------------------------------------------------

    def _emit(self, type_: str, experiment_id: str, data: dict) -> None:
        with self._lock:
            event = {
                "seq": len(self._events),
                "ts": time.time(),
                "type": type_,
                "experiment_id": experiment_id,
                "data": data,
            }
            self._events.append(event)
            self._event_cond.notify_all()

    def get_events(self, since: int = -1, timeout: float = 0.0) -> list[dict]:
        """Events with seq > since; blocks up to timeout if none available."""
        deadline = time.time() + timeout
        with self._lock:
            while len(self._events) <= since + 1 and not self._stopping:
                remaining = deadline - time.time()
                if remaining <= 0:
                    break
                self._event_cond.wait(remaining)
            return [e for e in self._events if e["seq"] > since]

    # -- logs -------------------------------------------------------------------------

    def _append_log(self, rt: ExperimentRuntime, run_id: str, stream: str, seq: int,
                    ts: float, line: str) -> None:
        with self._log_lock:
            record = LogRecord(
                experiment_id=rt.record.id,
                run_id=run_id,
                stream=stream,
                seq=seq,
                timestamp=ts,
                line=line,
                global_seq=rt.log_next_seq,
            )
            rt.log_next_seq += 1
            self.root.append_log(self.cluster.name, record)
            self._notify_log_subscribers(rt, record)

    def _notify_log_subscribers(self, rt: ExperimentRuntime, record: Optional[LogRecord]) -> None:
        for q in list(rt.log_subscribers):
            q.put(record)

    def iter_logs(
        self, experiment_id: str, follow: bool = False, since_seq: int = -1
    ) -> Iterator[LogRecord]:
        """Replay stored records, then (if follow) stream live ones until the
        experiment is terminal and drained. Resumable via since_seq."""
        with self._lock:
            rt = self._runtime(experiment_id)
        sub: Optional[queue.Queue] = None
        with self._log_lock:
            replay = self.root.read_logs(self.cluster.name, experiment_id)
            if follow:
                sub = queue.Queue()
                rt.log_subscribers.append(sub)
                with self._lock:
                    terminal = rt.record.state != EXPERIMENT_ACTIVE and not rt.live_runs()
                if terminal:
                    sub.put(None)
        last = since_seq
        try:
            for record in replay:
                if record.global_seq > last:
                    last = record.global_seq
                    yield record
            if not follow:
                return
            while True:
                record = sub.get()
                if record is None:
                    return
                if record.global_seq > last:
                    last = record.global_seq
                    yield record
        finally:
            if sub is not None:
                with self._log_lock:
                    if sub in rt.log_subscribers:
                        rt.log_subscribers.remove(sub)


# -- experiment config parsing -------------------------------------------------------


def parse_experiment_config(config: dict, cluster_name: str) -> ExperimentRecord:
    """Validate an experiment config mapping into a fresh ExperimentRecord."""
    if not isinstance(config, dict):
        raise ValidationError("<root>", "experiment config must be a mapping")
    name = config.get("name")
    if not name or not isinstance(name, str):
        raise ValidationError("name", "required non-empty string")
    strategy = config.get("strategy", "random")
    if strategy not in optimizer.STRATEGIES:
        raise ValidationError("strategy", f"must be one of {', '.join(optimizer.STRATEGIES)}")
    budget = config.get("observation_budget")
    if not isinstance(budget, int) or budget < 1:
        raise ValidationError("observation_budget", "must be a positive integer")
    bandwidth = config.get("parallel_bandwidth", 1)
    if not isinstance(bandwidth, int) or bandwidth < 1:
        raise ValidationError("parallel_bandwidth", "must be a positive integer")
    space = optimizer.validate_space(config.get("parameters") or [])

    resources = config.get("resources") or {}
    if not isinstance(resources, dict):
        raise ValidationError("resources", "must be a mapping")
    gpus = resources.get("gpus", 0)
    cpus = resources.get("cpus", 1)
    if not isinstance(gpus, int) or gpus < 0:
        raise ValidationError("resources.gpus", "must be a non-negative integer")
    if not isinstance(cpus, int) or cpus < 1:
        raise ValidationError("resources.cpus", "must be a positive integer")

    run = config.get("run")
    synthetic = config.get("synthetic")
    if (run is None) == (synthetic is None):
        raise ValidationError("run", "exactly one of run:/synthetic: must be present")
    if run is not None:
        if not isinstance(run, dict):
            raise ValidationError("run", "must be a mapping")
        command = run.get("command")
        if isinstance(command, str):
            import shlex

            command = shlex.split(command)
            run = dict(run, command=command)
        if not command or not isinstance(command, list):
            raise ValidationError("run.command", "required non-empty command")
    if synthetic is not None:
        if not isinstance(synthetic, dict):
            raise ValidationError("synthetic", "must be a mapping")
        if synthetic.get("objective") not in executor.SYNTHETIC_OBJECTIVES:
            raise ValidationError(
                "synthetic.objective",
                f"must be one of {', '.join(executor.SYNTHETIC_OBJECTIVES)}",
            )

    seed = config.get("seed", 0)
    if not isinstance(seed, int):
        raise ValidationError("seed", "must be an integer")

    return ExperimentRecord(
        id=new_id("e-"),
        name=name,
        cluster_name=config.get("cluster_name", cluster_name),
        space=space.to_list(),
        strategy=strategy,
        observation_budget=budget,
        parallel_bandwidth=bandwidth,
        resources={"gpus": gpus, "cpus": cpus},
        run=run,
        synthetic=synthetic,
        seed=seed,
        created_at=time.time(),
        strategy_params=config.get("strategy_params") or {},
    )
