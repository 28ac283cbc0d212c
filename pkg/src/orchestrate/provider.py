"""Simulated cloud provider.

Turns a cluster configuration file into a logical cluster of
capacity-bearing nodes, enforces the per-account cluster quota, and
supports bounded scaling and destruction. No cloud calls anywhere.
"""

from __future__ import annotations

import json
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import NotFoundError, QuotaError, UserError, ValidationError
from .store import PurgeReport, StateRoot

ENV_CATALOG = "ORCHESTRATE_CATALOG"
ENV_QUOTA = "ORCHESTRATE_CLUSTER_QUOTA"
DEFAULT_QUOTA = 3
SUPPORTED_PROVIDERS = ("aws-sim", "aws")  # "aws" accepted for config-file compatibility

POOL_KINDS = ("gpu", "cpu")


@dataclass(frozen=True)
class InstanceCapacity:
    instance_type: str
    cpus: int
    gpus: int


@dataclass(frozen=True)
class ResourceRequest:
    """What one run asks for. GPUs capped at 8, the largest single node."""

    gpus: int = 0
    cpus: int = 1

    MAX_GPUS_PER_RUN = 8

    def fits(self, free_cpus: int, free_gpus: int) -> bool:
        return self.cpus <= free_cpus and self.gpus <= free_gpus


@dataclass
class Node:
    id: str
    capacity: InstanceCapacity
    allocated_cpus: int = 0
    allocated_gpus: int = 0
    resident_runs: set = field(default_factory=set)
    idle_since: Optional[float] = None

    @property
    def free_cpus(self) -> int:
        return self.capacity.cpus - self.allocated_cpus

    @property
    def free_gpus(self) -> int:
        return self.capacity.gpus - self.allocated_gpus

    def allocate(self, run_id: str, request: ResourceRequest) -> None:
        if not request.fits(self.free_cpus, self.free_gpus):
            raise UserError(f"node {self.id} cannot fit request {request}")
        self.allocated_cpus += request.cpus
        self.allocated_gpus += request.gpus
        self.resident_runs.add(run_id)
        self.idle_since = None

    def release(self, run_id: str, request: ResourceRequest, now: float) -> None:
        self.resident_runs.discard(run_id)
        self.allocated_cpus -= request.cpus
        self.allocated_gpus -= request.gpus
        assert self.allocated_cpus >= 0 and self.allocated_gpus >= 0
        if not self.resident_runs:
            self.idle_since = now

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "instance_type": self.capacity.instance_type,
            "cpus": self.capacity.cpus,
            "gpus": self.capacity.gpus,
            "allocated_cpus": self.allocated_cpus,
            "allocated_gpus": self.allocated_gpus,
            "resident_runs": sorted(self.resident_runs),
            "idle_since": self.idle_since,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Node":
        return cls(
            id=d["id"],
            capacity=InstanceCapacity(d["instance_type"], d["cpus"], d["gpus"]),
            allocated_cpus=d["allocated_cpus"],
            allocated_gpus=d["allocated_gpus"],
            resident_runs=set(d["resident_runs"]),
            idle_since=d.get("idle_since"),
        )


@dataclass
class NodePool:
    pool_kind: str  # "gpu" | "cpu"
    instance_type: str
    min_nodes: int
    max_nodes: int
    nodes: list = field(default_factory=list)  # list[Node]
    next_index: int = 0

    def to_dict(self) -> dict:
        return {
            "pool_kind": self.pool_kind,
            "instance_type": self.instance_type,
            "min_nodes": self.min_nodes,
            "max_nodes": self.max_nodes,
            "nodes": [n.to_dict() for n in self.nodes],
            "next_index": self.next_index,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NodePool":
        return cls(
            pool_kind=d["pool_kind"],
            instance_type=d["instance_type"],
            min_nodes=d["min_nodes"],
            max_nodes=d["max_nodes"],
            nodes=[Node.from_dict(n) for n in d["nodes"]],
            next_index=d["next_index"],
        )


@dataclass
class ClusterState:
    name: str
    pools: list  # list[NodePool]
    created_at: float
    controller_endpoint: Optional[str] = None
    controller_pid: Optional[int] = None

    def all_nodes(self) -> list:
        return [n for p in self.pools for n in p.nodes]

    def find_node(self, node_id: str) -> Node:
        for n in self.all_nodes():
            if n.id == node_id:
                return n
        raise NotFoundError(f"node not found: {node_id}")

    def pool(self, pool_kind: str) -> "NodePool":
        for p in self.pools:
            if p.pool_kind == pool_kind:
                return p
        raise NotFoundError(f"cluster {self.name} has no {pool_kind} pool")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pools": [p.to_dict() for p in self.pools],
            "created_at": self.created_at,
            "controller_endpoint": self.controller_endpoint,
            "controller_pid": self.controller_pid,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterState":
        return cls(
            name=d["name"],
            pools=[NodePool.from_dict(p) for p in d["pools"]],
            created_at=d["created_at"],
            controller_endpoint=d.get("controller_endpoint"),
            controller_pid=d.get("controller_pid"),
        )


@dataclass
class PoolConfig:
    instance_type: str
    min_nodes: int
    max_nodes: int


@dataclass
class ClusterConfig:
    cloud_provider: str
    cluster_name: str
    gpu: Optional[PoolConfig] = None
    cpu: Optional[PoolConfig] = None


@dataclass
class DestroyReport:
    cluster_name: str
    runs_killed: int
    purge: PurgeReport


# -- catalog -----------------------------------------------------------------


def _builtin_catalog_path() -> Path:
    return Path(__file__).parent / "data" / "instance_catalog.yml"


def load_catalog(root: Optional[StateRoot] = None) -> dict[str, InstanceCapacity]:
    """Built-in catalog, optionally extended by a user catalog file."""
    catalog: dict[str, InstanceCapacity] = {}

    def _merge(path: Path) -> None:
        data = yaml.safe_load(path.read_text()) or {}
        for name, spec in data.items():
            catalog[name] = InstanceCapacity(name, int(spec["cpus"]), int(spec["gpus"]))

    _merge(_builtin_catalog_path())
    override = os.environ.get(ENV_CATALOG)
    if override and Path(override).is_file():
        _merge(Path(override))
    elif root is not None and (root.path / "catalog.yml").is_file():
        _merge(root.path / "catalog.yml")
    return catalog


def catalog_lookup(instance_type: str, root: Optional[StateRoot] = None) -> InstanceCapacity:
    catalog = load_catalog(root)
    if instance_type not in catalog:
        known = ", ".join(sorted(catalog))
        raise NotFoundError(f"unknown instance type {instance_type!r}; known types: {known}")
    return catalog[instance_type]


# -- config parsing ------------------------------------------------------------


def _parse_pool(kind: str, raw: dict, catalog: dict) -> PoolConfig:
    prefix = kind
    if not isinstance(raw, dict):
        raise ValidationError(prefix, "must be a mapping")
    for key in ("instance_type", "min_nodes", "max_nodes"):
        if key not in raw:
            raise ValidationError(f"{prefix}.{key}", "missing required field")
    itype = raw["instance_type"]
    if itype not in catalog:
        known = ", ".join(sorted(catalog))
        raise ValidationError(
            f"{prefix}.instance_type", f"unknown instance type {itype!r}; known types: {known}"
        )
    try:
        lo, hi = int(raw["min_nodes"]), int(raw["max_nodes"])
    except (TypeError, ValueError):
        raise ValidationError(f"{prefix}.min_nodes", "must be integers")
    if lo < 0 or lo > hi:
        raise ValidationError(f"{prefix}.min_nodes", "need 0 <= min_nodes <= max_nodes")
    if kind == "gpu" and catalog[itype].gpus == 0:
        raise ValidationError(f"{prefix}.instance_type", f"{itype} has no GPUs")
    return PoolConfig(itype, lo, hi)


def parse_cluster_config(data: dict, root: Optional[StateRoot] = None) -> ClusterConfig:
    if not isinstance(data, dict):
        raise ValidationError("<root>", "cluster config must be a mapping")
    provider = data.get("cloud_provider")
    if provider not in SUPPORTED_PROVIDERS:
        raise ValidationError(
            "cloud_provider", f"only the simulated provider is supported (got {provider!r})"
        )
    name = data.get("cluster_name")
    if not name or not isinstance(name, str):
        raise ValidationError("cluster_name", "required non-empty string")
    catalog = load_catalog(root)
    gpu = _parse_pool("gpu", data["gpu"], catalog) if "gpu" in data else None
    cpu = _parse_pool("cpu", data["cpu"], catalog) if "cpu" in data else None
    if gpu is None and cpu is None:
        raise ValidationError("<root>", "at least one of gpu:/cpu: pool blocks is required")
    return ClusterConfig(cloud_provider=provider, cluster_name=name, gpu=gpu, cpu=cpu)


def load_cluster_config(path: Path | str, root: Optional[StateRoot] = None) -> ClusterConfig:
    path = Path(path)
    if not path.is_file():
        raise UserError(f"config file not found: {path}")
    return parse_cluster_config(yaml.safe_load(path.read_text()), root)


# -- provider ------------------------------------------------------------------


class Provider:
    """Owns cluster lifecycle and quota accounting on top of a StateRoot."""

    def __init__(self, root: StateRoot, quota: Optional[int] = None):
        self.root = root
        if quota is None:
            quota = int(os.environ.get(ENV_QUOTA, DEFAULT_QUOTA))
        self.quota = quota

    def _state_path(self, name: str) -> Path:
        return self.root.cluster_dir(name) / "state.json"

    def list_clusters(self) -> list[str]:
        d = self.root.clusters_dir
        if not d.is_dir():
            return []
        return sorted(p.name for p in d.iterdir() if (p / "state.json").is_file())

    def load_cluster(self, name: str) -> ClusterState:
        path = self._state_path(name)
        if not path.is_file():
            raise NotFoundError(f"cluster not found: {name}")
        return ClusterState.from_dict(json.loads(path.read_text()))

    def save_cluster(self, state: ClusterState) -> None:
        path = self._state_path(state.name)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(state.to_dict(), indent=2))
        os.replace(tmp, path)

    def _new_node(self, cluster: str, pool: NodePool, catalog: dict, now: float) -> Node:
        node = Node(
            id=f"{cluster}-{pool.pool_kind}-{pool.next_index:03d}",
            capacity=catalog[pool.instance_type],
            idle_since=now,
        )
        pool.next_index += 1
        return node

    def create_cluster(self, config: ClusterConfig) -> ClusterState:
        existing = self.list_clusters()
        if config.cluster_name in existing:
            raise UserError(f"cluster name already in use: {config.cluster_name}")
        if len(existing) >= self.quota:
            raise QuotaError(
                f"account quota of {self.quota} clusters reached "
                f"({', '.join(existing)}); destroy one first"
            )
        catalog = load_catalog(self.root)
        now = time.time()
        pools = []
        for kind, pc in (("gpu", config.gpu), ("cpu", config.cpu)):
            if pc is None:
                continue
            pool = NodePool(kind, pc.instance_type, pc.min_nodes, pc.max_nodes)
            for _ in range(pc.min_nodes):
                pool.nodes.append(self._new_node(config.cluster_name, pool, catalog, now))
            pools.append(pool)
        state = ClusterState(name=config.cluster_name, pools=pools, created_at=now)
        self.save_cluster(state)
        return state

    def scale_pool(self, state: ClusterState, pool_kind: str, desired: int) -> ClusterState:
        pool = state.pool(pool_kind)
        target = max(pool.min_nodes, min(pool.max_nodes, desired))
        catalog = load_catalog(self.root)
        now = time.time()
        while len(pool.nodes) < target:
            pool.nodes.append(self._new_node(state.name, pool, catalog, now))
        while len(pool.nodes) > target:
            # Drain-free shrink: only empty nodes may go; take the newest empty one.
            victim = None
            for node in reversed(pool.nodes):
                if not node.resident_runs:
                    victim = node
                    break
            if victim is None:
                busy = pool.nodes[-1].id
                raise UserError(
                    f"cannot shrink {pool_kind} pool: node {busy} has resident runs"
                )
            pool.nodes.remove(victim)
        self.save_cluster(state)
        return state

    def remove_cluster_dir(self, name: str) -> None:
        d = self.root.cluster_dir(name)
        if d.is_dir():
            shutil.rmtree(d)


def cluster_totals(state: ClusterState) -> dict:
    nodes = state.all_nodes()
    return {
        "nodes": len(nodes),
        "cpus": sum(n.capacity.cpus for n in nodes),
        "gpus": sum(n.capacity.gpus for n in nodes),
        "allocated_cpus": sum(n.allocated_cpus for n in nodes),
        "allocated_gpus": sum(n.allocated_gpus for n in nodes),
    }
