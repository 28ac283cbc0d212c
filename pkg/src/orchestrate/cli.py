"""The ``orchestrate`` command line tool.

Thin, stateless client of the per-cluster controller API. Exit codes:
0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path
from typing import Optional

import click
import requests
import yaml

from . import store as store_mod
from .errors import NotFoundError, OrchestrateError, UserError
from .provider import Provider, cluster_totals, load_cluster_config
from .store import StateRoot, init_home

CONTROLLER_SPAWN_TIMEOUT = 15.0
LOG_PALETTE = ["green", "blue", "yellow", "magenta", "cyan", "red"]


def get_root() -> StateRoot:
    return init_home(store_mod.default_home())


def _endpoint_url(endpoint: str, path: str) -> str:
    return f"http://{endpoint}{path}"


def _controller_alive(endpoint: Optional[str]) -> bool:
    if not endpoint:
        return False
    try:
        r = requests.get(_endpoint_url(endpoint, "/v1/cluster/status"), timeout=1)
        return r.status_code == 200
    except requests.RequestException:
        return False


def _api_error(response: requests.Response) -> UserError:
    try:
        message = response.json().get("error", response.text)
    except ValueError:
        message = response.text
    if response.status_code == 404:
        return NotFoundError(message)
    if response.status_code == 400:
        return UserError(message)
    return OrchestrateError(message)


def ensure_controller(root: StateRoot, cluster_name: str) -> str:
    """Return a live controller endpoint, spawning the daemon if needed."""
    provider = Provider(root)
    cluster = provider.load_cluster(cluster_name)
    if _controller_alive(cluster.controller_endpoint):
        return cluster.controller_endpoint

    log_path = root.cluster_dir(cluster_name) / "controller.log"
    with open(log_path, "a") as log_file:
        subprocess.Popen(
            [sys.executable, "-m", "orchestrate", "controller", "serve", "-n", cluster_name],
            stdout=log_file,
            stderr=subprocess.STDOUT,
            stdin=subprocess.DEVNULL,
            start_new_session=True,
            env=dict(os.environ, **{store_mod.ENV_HOME: str(root.path)}),
        )
    deadline = time.time() + CONTROLLER_SPAWN_TIMEOUT
    while time.time() < deadline:
        cluster = provider.load_cluster(cluster_name)
        if _controller_alive(cluster.controller_endpoint):
            return cluster.controller_endpoint
        time.sleep(0.1)
    raise OrchestrateError(
        f"controller for cluster {cluster_name} did not come up; see {log_path}"
    )


def _find_controller_for_experiment(root: StateRoot, experiment_id: str):
    """(record, endpoint-or-None). Endpoint is None if the cluster or its
    controller is gone; callers fall back to the durable store."""
    record = root.load_experiment(experiment_id)
    provider = Provider(root)
    if record.cluster_name not in provider.list_clusters():
        return record, None
    cluster = provider.load_cluster(record.cluster_name)
    if _controller_alive(cluster.controller_endpoint):
        return record, cluster.controller_endpoint
    return record, None


# -- command group ------------------------------------------------------------


@click.group()
def cli():
    """Desk-scale hyperparameter tuning orchestration."""


@cli.group()
def cluster():
    """Cluster lifecycle commands."""


@cluster.command("create")
@click.option("-f", "--file", "config_file", required=True, type=click.Path())
def cluster_create(config_file):
    """Create a logical cluster from a configuration file."""
    root = get_root()
    config = load_cluster_config(config_file, root)
    provider = Provider(root)
    state = provider.create_cluster(config)
    totals = cluster_totals(state)
    click.echo(f"cluster {state.name} created")
    for pool in state.pools:
        gpus = sum(n.capacity.gpus for n in pool.nodes)
        line = f"{pool.pool_kind} pool: {len(pool.nodes)} × {pool.instance_type}"
        if gpus:
            line += f" ({gpus} GPUs)"
        click.echo(line)
    click.echo(f"total: {totals['nodes']} nodes, {totals['cpus']} CPUs, {totals['gpus']} GPUs")


@cluster.command("destroy")
@click.option("-n", "--name", required=True)
def cluster_destroy(name):
    """Destroy a cluster: kill runs, purge logs, keep experiment metadata."""
    root = get_root()
    provider = Provider(root)
    cluster_state = provider.load_cluster(name)

    runs_killed = 0
    endpoint = cluster_state.controller_endpoint
    if _controller_alive(endpoint):
        try:
            r = requests.get(_endpoint_url(endpoint, "/v1/experiments"), timeout=5)
            if r.ok:
                for exp in r.json()["experiments"]:
                    by_state = exp.get("runs_by_state", {})
                    runs_killed += sum(
                        by_state.get(s, 0) for s in ("queued", "scheduled", "running")
                    )
            requests.post(_endpoint_url(endpoint, "/v1/shutdown"), timeout=5)
        except requests.RequestException:
            pass
        deadline = time.time() + 30
        while time.time() < deadline and _controller_alive(endpoint):
            time.sleep(0.1)
    if cluster_state.controller_pid:
        try:
            os.kill(cluster_state.controller_pid, signal.SIGTERM)
        except (ProcessLookupError, PermissionError):
            pass

    report = root.purge_cluster_artifacts(name, time.time())
    provider.remove_cluster_dir(name)
    click.echo(f"cluster {name} destroyed")
    click.echo(f"runs killed: {runs_killed}")
    click.echo(f"logs deleted: {report.logs_deleted}")
    click.echo(f"experiments retained: {report.experiments_retained}")


@cluster.command("status")
@click.option("-n", "--name", required=True)
def cluster_status(name):
    """Show node pools, capacity, and allocation for a cluster."""
    root = get_root()
    provider = Provider(root)
    state = provider.load_cluster(name)
    if _controller_alive(state.controller_endpoint):
        r = requests.get(_endpoint_url(state.controller_endpoint, "/v1/cluster/status"), timeout=5)
        if not r.ok:
            raise _api_error(r)
        payload = r.json()
        pools = payload["pools"]
        uptime = payload["controller_uptime"]
        click.echo(f"cluster {name} (controller up {uptime:.0f}s)")
    else:
        pools = [p.to_dict() for p in state.pools]
        click.echo(f"cluster {name} (controller not running)")
    for pool in pools:
        click.echo(
            f"{pool['pool_kind']} pool: {len(pool['nodes'])} × {pool['instance_type']} "
            f"(min {pool['min_nodes']}, max {pool['max_nodes']})"
        )
        for node in pool["nodes"]:
            click.echo(
                f"  {node['id']}  cpus {node['allocated_cpus']}/{node['cpus']}"
                f"  gpus {node['allocated_gpus']}/{node['gpus']}"
                f"  runs {len(node['resident_runs'])}"
            )


@cli.command("run")
@click.option("-f", "--file", "config_file", required=True, type=click.Path())
@click.option("--cluster", "cluster_flag", default=None, help="Cluster to run on.")
@click.option("--wait", is_flag=True, help="Block until the experiment is terminal.")
def run_cmd(config_file, cluster_flag, wait):
    """Start an experiment; prints its id on a single line."""
    root = get_root()
    path = Path(config_file)
    if not path.is_file():
        raise UserError(f"config file not found: {path}")
    config = yaml.safe_load(path.read_text())
    if not isinstance(config, dict):
        raise UserError("experiment config must be a mapping")
    cluster_name = cluster_flag or config.get("cluster_name")
    if not cluster_name:
        raise UserError("no cluster specified: pass --cluster or set cluster_name in the config")
    endpoint = ensure_controller(root, cluster_name)
    r = requests.post(_endpoint_url(endpoint, "/v1/experiments"), json=config, timeout=30)
    if not r.ok:
        raise _api_error(r)
    experiment_id = r.json()["experiment_id"]
    click.echo(experiment_id)
    if wait:
        while True:
            s = requests.get(
                _endpoint_url(endpoint, f"/v1/experiments/{experiment_id}"), timeout=10
            )
            if not s.ok:
                raise _api_error(s)
            if s.json()["state"] != "active":
                break
            time.sleep(0.2)


def _render_status(status: dict, cluster_destroyed: bool) -> None:
    click.echo(f"experiment {status['id']} ({status['name']}) [{status['state']}]")
    click.echo(f"strategy: {status['strategy']}")
    budget = status["budget"]
    click.echo(
        f"completed {budget['completed'] + budget['failed']}/{budget['total']} "
        f"({budget['failed']} failed)"
    )
    best = status.get("best")
    if best:
        assignment = " ".join(f"{k}={v}" for k, v in sorted(best["assignment"].items()))
        click.echo(f"best: value={best['value']} {assignment}")
    else:
        click.echo("best: none")
    if cluster_destroyed:
        click.echo("runs: cluster destroyed")
        return
    runs = status.get("runs", [])
    click.echo(f"runs ({len(runs)}):")
    click.echo("  run_id  state  node  duration")
    for run in runs:
        duration = f"{run['duration']:.2f}s" if run.get("duration") is not None else "-"
        click.echo(
            f"  {run['run_id']}  {run['state']}  {run.get('node_id') or '-'}  {duration}"
        )


def _status_from_store(record) -> dict:
    successes = sum(1 for o in record.observations if not o.failed)
    failures = sum(1 for o in record.observations if o.failed)
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
        "best": (
            {"assignment": record.best[0], "value": record.best[1]} if record.best else None
        ),
        "runs": [],
    }


@cli.command("status")
@click.argument("experiment_id")
def status_cmd(experiment_id):
    """Show progress, best value, and the run table for an experiment."""
    root = get_root()
    record, endpoint = _find_controller_for_experiment(root, experiment_id)
    if endpoint is not None:
        r = requests.get(_endpoint_url(endpoint, f"/v1/experiments/{experiment_id}"), timeout=10)
        if not r.ok:
            raise _api_error(r)
        _render_status(r.json(), cluster_destroyed=False)
    else:
        provider = Provider(root)
        destroyed = record.cluster_name not in provider.list_clusters()
        _render_status(_status_from_store(record), cluster_destroyed=destroyed)


@cli.command("logs")
@click.option("--follow", is_flag=True, help="Stream live records until terminal.")
@click.argument("experiment_id")
def logs_cmd(follow, experiment_id):
    """Print an experiment's aggregated logs, color-coded per run."""
    root = get_root()
    record, endpoint = _find_controller_for_experiment(root, experiment_id)
    provider = Provider(root)
    if record.cluster_name not in provider.list_clusters():
        raise UserError("logs unavailable: cluster destroyed")

    use_color = sys.stdout.isatty()
    colors: dict[str, str] = {}

    def emit(rec: dict) -> None:
        run_id = rec["run_id"]
        if run_id not in colors:
            colors[run_id] = LOG_PALETTE[len(colors) % len(LOG_PALETTE)]
        short = run_id[-6:]
        prefix = f"{short} {rec['stream']}|"
        if use_color:
            prefix = click.style(prefix, fg=colors[run_id])
        click.echo(f"{prefix} {rec['line']}")

    if endpoint is not None:
        params = {"since_seq": -1}
        if follow:
            params["follow"] = 1
        r = requests.get(
            _endpoint_url(endpoint, f"/v1/experiments/{experiment_id}/logs"),
            params=params,
            stream=True,
            timeout=None if follow else 30,
        )
        if not r.ok:
            raise _api_error(r)
        for line in r.iter_lines():
            if line:
                emit(json.loads(line))
    else:
        for rec in root.read_logs(record.cluster_name, experiment_id):
            emit(rec.to_dict())


@cli.command("delete")
@click.argument("experiment_id")
def delete_cmd(experiment_id):
    """Stop an experiment: kill its runs and free its resources. Idempotent."""
    root = get_root()
    record, endpoint = _find_controller_for_experiment(root, experiment_id)
    if endpoint is not None:
        r = requests.post(
            _endpoint_url(endpoint, f"/v1/experiments/{experiment_id}/stop"), timeout=30
        )
        if not r.ok:
            raise _api_error(r)
        killed = r.json().get("killed", 0)
    else:
        killed = 0
        if record.state == "active":
            root.mark_deleted(experiment_id, time.time())
    click.echo(f"killed {killed} runs")


@cli.group(hidden=True)
def controller():
    """Controller daemon management (spawned automatically by `run`)."""


@controller.command("serve")
@click.option("-n", "--name", required=True)
def controller_serve(name):
    """Run the controller loop for a cluster in the foreground."""
    from .httpapi import ControllerServer

    root = get_root()
    server = ControllerServer(root, name)

    def handle_signal(signum, frame):
        server.initiate_shutdown()

    signal.signal(signal.SIGTERM, handle_signal)
    signal.signal(signal.SIGINT, handle_signal)
    click.echo(f"controller for cluster {name} listening on {server.endpoint}")
    server.serve_forever()


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as e:
        e.show(file=sys.stderr)
        return 1
    except click.Abort:
        return 1
    except UserError as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except OrchestrateError as e:
        click.echo(f"internal error: {e}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
