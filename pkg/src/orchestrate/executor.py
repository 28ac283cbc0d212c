"""Run execution: one supervised local process per model evaluation.

Protocol (language-agnostic, file based): the process receives
``ORCHESTRATE_SUGGESTION_FILE`` pointing at a JSON file with the parameter
assignment and must write ``ORCHESTRATE_OBSERVATION_FILE`` as JSON with a
finite ``value`` (optionally ``"failed": true`` to force a failure). GPU
slots are accounting tokens only, exported via ``ORCHESTRATE_ASSIGNED_GPUS``.

A synthetic in-process mode evaluates built-in objectives analytically for
fast scheduler and end-to-end tests.
"""

from __future__ import annotations

import json
import math
import os
import signal
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .errors import UserError
from .provider import ResourceRequest

ENV_EXPERIMENT_ID = "ORCHESTRATE_EXPERIMENT_ID"
ENV_RUN_ID = "ORCHESTRATE_RUN_ID"
ENV_SUGGESTION_FILE = "ORCHESTRATE_SUGGESTION_FILE"
ENV_OBSERVATION_FILE = "ORCHESTRATE_OBSERVATION_FILE"
ENV_ASSIGNED_GPUS = "ORCHESTRATE_ASSIGNED_GPUS"

MAX_LINE_BYTES = 1 << 20
TRUNCATION_MARKER = " [truncated]"
DEFAULT_GRACE_PERIOD = 5.0

DISPOSITION_SUCCEEDED = "succeeded"
DISPOSITION_FAILED = "failed"
DISPOSITION_KILLED = "killed"

# sink(stream, seq, timestamp, line)
LogSink = Callable[[str, int, float, str], None]


@dataclass
class RunSpec:
    command: list
    workdir: Optional[str] = None
    env: dict = field(default_factory=dict)
    resources: ResourceRequest = field(default_factory=ResourceRequest)
    timeout: Optional[float] = None

    def __post_init__(self):
        if not self.command:
            raise UserError("run command must be non-empty")


@dataclass
class Outcome:
    disposition: str
    value: Optional[float] = None
    reason: Optional[str] = None
    exit_code: Optional[int] = None
    duration: float = 0.0

    def __post_init__(self):
        if self.disposition == DISPOSITION_SUCCEEDED and self.value is None:
            raise ValueError("succeeded outcome requires a value")
        if self.disposition != DISPOSITION_SUCCEEDED and self.value is not None:
            raise ValueError("only succeeded outcomes carry a value")


class ProcessHandle:
    """One launched evaluation process and its log pump threads."""

    def __init__(self, run_id: str, experiment_id: str, proc: subprocess.Popen,
                 observation_file: Path, started_at: float,
                 timeout: Optional[float]):
        self.run_id = run_id
        self.experiment_id = experiment_id
        self.proc = proc
        self.observation_file = observation_file
        self.started_at = started_at
        self.timeout = timeout
        self.killed = threading.Event()
        self._pumps: list[threading.Thread] = []

    def _pump(self, stream_name: str, pipe, sink: LogSink) -> None:
        seq = 0
        for raw in iter(pipe.readline, b""):
            line = raw.rstrip(b"\n")
            if len(line) > MAX_LINE_BYTES:
                line = line[:MAX_LINE_BYTES] + TRUNCATION_MARKER.encode()
            sink(stream_name, seq, time.time(), line.decode("utf-8", errors="replace"))
            seq += 1
        pipe.close()

    def start_pumps(self, sink: LogSink) -> None:
        for name, pipe in (("stdout", self.proc.stdout), ("stderr", self.proc.stderr)):
            t = threading.Thread(target=self._pump, args=(name, pipe, sink), daemon=True)
            t.start()
            self._pumps.append(t)

    def kill(self, grace_period: float = DEFAULT_GRACE_PERIOD) -> None:
        """Signal the whole process group, then hard-kill after the grace period."""
        self.killed.set()
        try:
            pgid = os.getpgid(self.proc.pid)
        except ProcessLookupError:
            return
        try:
            os.killpg(pgid, signal.SIGTERM)
        except ProcessLookupError:
            return
        deadline = time.time() + grace_period
        while time.time() < deadline:
            if self.proc.poll() is not None:
                break
            time.sleep(0.01)
        if self.proc.poll() is None:
            try:
                os.killpg(pgid, signal.SIGKILL)
            except ProcessLookupError:
                pass


def launch(
    run_id: str,
    experiment_id: str,
    assignment: dict,
    spec: RunSpec,
    gpu_slots: list,
    scratch_dir: Path,
    sink: LogSink,
) -> ProcessHandle:
    """Start the evaluation process. Raises UserError on spawn failure."""
    scratch_dir = Path(scratch_dir)
    scratch_dir.mkdir(parents=True, exist_ok=True)
    suggestion_file = scratch_dir / "suggestion.json"
    observation_file = scratch_dir / "observation.json"
    suggestion_file.write_text(json.dumps(assignment))

    env = dict(os.environ)
    env.update({str(k): str(v) for k, v in spec.env.items()})
    env[ENV_EXPERIMENT_ID] = experiment_id
    env[ENV_RUN_ID] = run_id
    env[ENV_SUGGESTION_FILE] = str(suggestion_file)
    env[ENV_OBSERVATION_FILE] = str(observation_file)
    env[ENV_ASSIGNED_GPUS] = ",".join(str(s) for s in gpu_slots)

    command = [str(c) for c in spec.command]
    try:
        proc = subprocess.Popen(
            command,
            cwd=spec.workdir,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,  # own process group, so kill reaps descendants
        )
    except (OSError, ValueError) as e:
        raise UserError(f"spawn error: {e}") from e

    handle = ProcessHandle(
        run_id=run_id,
        experiment_id=experiment_id,
        proc=proc,
        observation_file=observation_file,
        started_at=time.time(),
        timeout=spec.timeout,
    )
    handle.start_pumps(sink)
    return handle


def _parse_observation_file(path: Path) -> Outcome:
    if not path.is_file():
        return Outcome(DISPOSITION_FAILED, reason="missing observation", exit_code=0)
    try:
        data = json.loads(path.read_text())
    except (json.JSONDecodeError, OSError):
        return Outcome(DISPOSITION_FAILED, reason="missing observation", exit_code=0)
    if not isinstance(data, dict):
        return Outcome(DISPOSITION_FAILED, reason="missing observation", exit_code=0)
    if data.get("failed") is True:
        return Outcome(DISPOSITION_FAILED, reason="reported failed", exit_code=0)
    value = data.get("value")
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        return Outcome(DISPOSITION_FAILED, reason="non-finite metric", exit_code=0)
    return Outcome(DISPOSITION_SUCCEEDED, value=float(value), exit_code=0)


def collect(handle: ProcessHandle, grace_period: float = DEFAULT_GRACE_PERIOD) -> Outcome:
    """Wait for the process and classify the result. Every path yields an Outcome."""
    timed_out = False
    try:
        handle.proc.wait(timeout=handle.timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        handle.kill(grace_period)
        handle.proc.wait()
    for t in handle._pumps:
        t.join(timeout=5)
    duration = time.time() - handle.started_at

    if timed_out:
        return Outcome(DISPOSITION_KILLED, reason="timeout", duration=duration)
    code = handle.proc.returncode
    if handle.killed.is_set() or code in (-signal.SIGTERM, -signal.SIGKILL):
        return Outcome(DISPOSITION_KILLED, reason="killed", exit_code=code, duration=duration)
    if code != 0:
        return Outcome(
            DISPOSITION_FAILED, reason=f"exit code {code}", exit_code=code, duration=duration
        )
    outcome = _parse_observation_file(handle.observation_file)
    outcome.duration = duration
    return outcome


# -- synthetic mode --------------------------------------------------------------

SYNTHETIC_OBJECTIVES = ("negated_quadratic", "sphere", "step_failure")


def synthetic_execute(assignment: dict, objective: str, params: Optional[dict] = None) -> Outcome:
    """Evaluate a built-in objective analytically; no process is spawned."""
    params = params or {}
    numeric = {k: v for k, v in assignment.items() if isinstance(v, (int, float))}
    if objective == "negated_quadratic":
        center = params.get("center", {})
        default_center = float(params.get("default_center", 0.0))
        value = -sum(
            (v - float(center.get(k, default_center))) ** 2 for k, v in numeric.items()
        )
        return Outcome(DISPOSITION_SUCCEEDED, value=value)
    if objective == "sphere":
        return Outcome(DISPOSITION_SUCCEEDED, value=-sum(v * v for v in numeric.values()))
    if objective == "step_failure":
        param = params.get("param")
        threshold = float(params.get("fail_below", 0.0))
        if param not in assignment:
            raise UserError(f"step_failure objective: unknown param {param!r}")
        if assignment[param] < threshold:
            return Outcome(DISPOSITION_FAILED, reason=f"{param} below {threshold}")
        return Outcome(DISPOSITION_SUCCEEDED, value=float(assignment[param]))
    raise UserError(
        f"unknown synthetic objective {objective!r}; choose from {', '.join(SYNTHETIC_OBJECTIVES)}"
    )
