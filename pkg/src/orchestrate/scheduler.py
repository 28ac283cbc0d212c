"""Run scheduling: bin-packing placement, fairness, and autoscaling.

Planning functions are pure over snapshots of cluster state; the controller
applies their output under its lock. Placement is best-fit within a
round-robin frame across experiments (creation order), which keeps the
cluster shared fairly when several experiments queue work at once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

from .errors import IllegalTransitionError, OrchestrateError, UserError
from .provider import ClusterState, Node, ResourceRequest

RUN_QUEUED = "queued"
RUN_SCHEDULED = "scheduled"
RUN_RUNNING = "running"
RUN_SUCCEEDED = "succeeded"
RUN_FAILED = "failed"
RUN_KILLED = "killed"

TERMINAL_RUN_STATES = {RUN_SUCCEEDED, RUN_FAILED, RUN_KILLED}
LIVE_RUN_STATES = {RUN_QUEUED, RUN_SCHEDULED, RUN_RUNNING}

_LEGAL_TRANSITIONS = {
    RUN_QUEUED: {RUN_SCHEDULED, RUN_KILLED},
    RUN_SCHEDULED: {RUN_RUNNING, RUN_KILLED, RUN_FAILED},
    RUN_RUNNING: {RUN_SUCCEEDED, RUN_FAILED, RUN_KILLED},
}


@dataclass
class RunRecord:
    run_id: str
    experiment_id: str
    suggestion_id: str
    assignment: dict
    request: ResourceRequest
    state: str = RUN_QUEUED
    node_id: Optional[str] = None
    gpu_slots: list = field(default_factory=list)
    created_at: float = 0.0
    transitions: dict = field(default_factory=dict)  # state -> timestamp
    exit_code: Optional[int] = None
    reason: Optional[str] = None
    value: Optional[float] = None

    def transition(self, new_state: str, at: Optional[float] = None) -> None:
        allowed = _LEGAL_TRANSITIONS.get(self.state, set())
        if new_state not in allowed:
            raise IllegalTransitionError(
                f"run {self.run_id}: illegal transition {self.state} -> {new_state}"
            )
        self.state = new_state
        self.transitions[new_state] = at if at is not None else time.time()

    @property
    def is_live(self) -> bool:
        return self.state in LIVE_RUN_STATES

    def duration(self) -> Optional[float]:
        start = self.transitions.get(RUN_RUNNING)
        if start is None:
            return None
        end = next(
            (self.transitions[s] for s in TERMINAL_RUN_STATES if s in self.transitions), None
        )
        return (end if end is not None else time.time()) - start

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "experiment_id": self.experiment_id,
            "suggestion_id": self.suggestion_id,
            "assignment": self.assignment,
            "gpus": self.request.gpus,
            "cpus": self.request.cpus,
            "state": self.state,
            "node_id": self.node_id,
            "gpu_slots": self.gpu_slots,
            "created_at": self.created_at,
            "transitions": self.transitions,
            "exit_code": self.exit_code,
            "reason": self.reason,
            "value": self.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        rec = cls(
            run_id=d["run_id"],
            experiment_id=d["experiment_id"],
            suggestion_id=d["suggestion_id"],
            assignment=d["assignment"],
            request=ResourceRequest(gpus=d["gpus"], cpus=d["cpus"]),
            created_at=d["created_at"],
        )
        rec.state = d["state"]
        rec.node_id = d.get("node_id")
        rec.gpu_slots = d.get("gpu_slots", [])
        rec.transitions = d.get("transitions", {})
        rec.exit_code = d.get("exit_code")
        rec.reason = d.get("reason")
        rec.value = d.get("value")
        return rec


def validate_request(request: ResourceRequest, cluster: ClusterState) -> None:
    """Reject requests that can never be satisfied, even at max scale."""
    if request.gpus > ResourceRequest.MAX_GPUS_PER_RUN:
        raise UserError(
            f"request for {request.gpus} GPUs exceeds largest supported node "
            f"({ResourceRequest.MAX_GPUS_PER_RUN} GPUs)"
        )
    if request.gpus < 0 or request.cpus < 1:
        raise UserError("resource request needs gpus >= 0 and cpus >= 1")
    for pool in cluster.pools:
        if pool.max_nodes < 1:
            continue
        cap = _pool_capacity(pool, cluster)
        if cap is not None and request.gpus <= cap.gpus and request.cpus <= cap.cpus:
            return
    raise UserError(
        f"unschedulable: no pool in cluster {cluster.name} can fit "
        f"{request.gpus} GPU(s) / {request.cpus} CPU(s) even at max scale"
    )


def _pool_capacity(pool, cluster: ClusterState):
    if pool.nodes:
        return pool.nodes[0].capacity
    # Empty pool: capacity comes from the catalog via any sibling node of the
    # same type, else we look it up lazily at the call site. Planning treats
    # an empty pool by instance type.
    from .provider import load_catalog

    return load_catalog().get(pool.instance_type)


@dataclass(frozen=True)
class Assignment:
    run_id: str
    node_id: str


def _free(node: Node, residual: dict) -> tuple[int, int]:
    used_cpus, used_gpus = residual[node.id]
    return node.capacity.cpus - used_cpus, node.capacity.gpus - used_gpus


def _pick_node(request: ResourceRequest, nodes_by_pool: dict, residual: dict) -> Optional[Node]:
    """Best fit: tightest (residual gpus, residual cpus), lowest id breaks ties."""

    def best_among(nodes) -> Optional[Node]:
        fitting = []
        for node in nodes:
            free_cpus, free_gpus = _free(node, residual)
            if request.fits(free_cpus, free_gpus):
                fitting.append((free_gpus, free_cpus, node.id, node))
        if not fitting:
            return None
        return min(fitting)[3]

    if request.gpus == 0:
        # GPU-free work prefers CPU-pool nodes so it never squats on GPU capacity.
        node = best_among(nodes_by_pool.get("cpu", []))
        if node is not None:
            return node
        return best_among(nodes_by_pool.get("gpu", []))
    return best_among(nodes_by_pool.get("gpu", []) + nodes_by_pool.get("cpu", []))


def _round_robin(queue: list[RunRecord], experiment_order: list[str]) -> list[RunRecord]:
    """Interleave queued runs across experiments in creation order."""
    by_exp: dict[str, list[RunRecord]] = {}
    for run in queue:
        by_exp.setdefault(run.experiment_id, []).append(run)
    order = [e for e in experiment_order if e in by_exp]
    # Experiments not in the provided order (shouldn't happen) go last, sorted.
    order += sorted(e for e in by_exp if e not in order)
    out: list[RunRecord] = []
    cursors = {e: 0 for e in order}
    while len(out) < len(queue):
        progressed = False
        for e in order:
            runs = by_exp[e]
            if cursors[e] < len(runs):
                out.append(runs[cursors[e]])
                cursors[e] += 1
                progressed = True
        if not progressed:
            break
    return out


def place_queued(
    cluster: ClusterState, queue: list[RunRecord], experiment_order: list[str]
) -> list[Assignment]:
    """Plan placements for queued runs. Pure; does not mutate anything.

    Deterministic given (cluster snapshot, queue, experiment order):
    candidates are drawn round-robin across experiments, each is best-fit
    against residual capacity, unplaceable candidates stay queued.

    Best-fit can occasionally place fewer runs than naive first-fit (a
    tightly-packed large run may starve several small ones), so when the
    first-fit plan is strictly larger we return that instead. This keeps the
    guarantee "never worse than first-fit" while preserving determinism.
    """
    nodes_by_pool = {p.pool_kind: list(p.nodes) for p in cluster.pools}
    residual = {n.id: (n.allocated_cpus, n.allocated_gpus) for n in cluster.all_nodes()}
    assignments: list[Assignment] = []
    for run in _round_robin(queue, experiment_order):
        node = _pick_node(run.request, nodes_by_pool, residual)
        if node is None:
            continue
        used_cpus, used_gpus = residual[node.id]
        residual[node.id] = (used_cpus + run.request.cpus, used_gpus + run.request.gpus)
        assignments.append(Assignment(run_id=run.run_id, node_id=node.id))
    fallback = place_first_fit(cluster, queue, experiment_order)
    if len(fallback) > len(assignments):
        return fallback
    return assignments


def place_first_fit(
    cluster: ClusterState, queue: list[RunRecord], experiment_order: list[str]
) -> list[Assignment]:
    """Baseline packer for regression comparison: first node (by id) that fits."""
    nodes = sorted(cluster.all_nodes(), key=lambda n: n.id)
    residual = {n.id: (n.allocated_cpus, n.allocated_gpus) for n in nodes}
    assignments = []
    for run in _round_robin(queue, experiment_order):
        for node in nodes:
            free_cpus, free_gpus = _free(node, residual)
            if run.request.fits(free_cpus, free_gpus):
                used_cpus, used_gpus = residual[node.id]
                residual[node.id] = (used_cpus + run.request.cpus, used_gpus + run.request.gpus)
                assignments.append(Assignment(run_id=run.run_id, node_id=node.id))
                break
    return assignments


def pick_gpu_slots(node: Node, runs_on_node: list[RunRecord], count: int) -> list[int]:
    """Lowest free GPU slot indices on the node; purely an accounting token."""
    taken = {s for r in runs_on_node for s in r.gpu_slots}
    slots = [i for i in range(node.capacity.gpus) if i not in taken]
    if len(slots) < count:
        raise OrchestrateError(f"node {node.id} lacks {count} free GPU slots")
    return slots[:count]


@dataclass(frozen=True)
class ScaleRequest:
    pool_kind: str
    delta: int  # +1 grow, -1 shrink


def autoscale_tick(
    cluster: ClusterState,
    queue: list[RunRecord],
    now: float,
    idle_timeout: float,
) -> list[ScaleRequest]:
    """Grow a pool when a queued run would fit a fresh node but fits nowhere
    now; shrink when a node has idled past the timeout. One step per pool."""
    from .provider import load_catalog

    catalog = load_catalog()
    requests: list[ScaleRequest] = []
    for pool in cluster.pools:
        cap = catalog.get(pool.instance_type)
        if cap is None and pool.nodes:
            cap = pool.nodes[0].capacity
        if cap is None:
            continue
        grow = False
        if len(pool.nodes) < pool.max_nodes:
            for run in queue:
                fits_fresh = run.request.gpus <= cap.gpus and run.request.cpus <= cap.cpus
                fits_now = any(
                    run.request.fits(n.free_cpus, n.free_gpus) for n in cluster.all_nodes()
                )
                if fits_fresh and not fits_now:
                    grow = True
                    break
        if grow:
            requests.append(ScaleRequest(pool.pool_kind, +1))
            continue
        if len(pool.nodes) > pool.min_nodes:
            for node in pool.nodes:
                if (
                    not node.resident_runs
                    and node.idle_since is not None
                    and now - node.idle_since > idle_timeout
                ):
                    requests.append(ScaleRequest(pool.pool_kind, -1))
                    break
    return requests
