import json
import os
import subprocess
import sys
import threading
import time

import pytest

from orchestrate.errors import UserError
from orchestrate.executor import (
    Outcome,
    RunSpec,
    collect,
    launch,
    synthetic_execute,
)

PY = sys.executable

READ_AND_REPORT = (
    "import json, os;"
    "a = json.load(open(os.environ['ORCHESTRATE_SUGGESTION_FILE']));"
    "json.dump({'value': a['x']}, open(os.environ['ORCHESTRATE_OBSERVATION_FILE'], 'w'))"
)


class Collector:
    def __init__(self):
        self.records = []
        self._lock = threading.Lock()

    def sink(self, stream, seq, ts, line):
        with self._lock:
            self.records.append((stream, seq, ts, line))

    def lines(self, stream=None):
        return [r[3] for r in self.records if stream is None or r[0] == stream]


def spawn(tmp_path, code, run_id="r1", assignment=None, gpu_slots=(), env=None, timeout=None):
    collector = Collector()
    spec = RunSpec(command=[PY, "-c", code], env=env or {}, timeout=timeout)
    handle = launch(
        run_id,
        "e1",
        assignment if assignment is not None else {"x": 0.5},
        spec,
        list(gpu_slots),
        tmp_path / run_id,
        collector.sink,
    )
    return handle, collector


class TestProtocol:
    def test_suggestion_round_trip(self, tmp_path):
        handle, _ = spawn(tmp_path, READ_AND_REPORT, assignment={"x": 0.5})
        outcome = collect(handle)
        assert outcome.disposition == "succeeded"
        assert outcome.value == 0.5
        written = json.loads((tmp_path / "r1" / "suggestion.json").read_text())
        assert written == {"x": 0.5}

    def test_value_reported(self, tmp_path):
        code = (
            "import json, os;"
            "json.dump({'value': 0.8}, open(os.environ['ORCHESTRATE_OBSERVATION_FILE'], 'w'))"
        )
        handle, _ = spawn(tmp_path, code)
        outcome = collect(handle)
        assert (outcome.disposition, outcome.value, outcome.exit_code) == ("succeeded", 0.8, 0)

    def test_nonzero_exit(self, tmp_path):
        handle, _ = spawn(tmp_path, "raise SystemExit(1)")
        outcome = collect(handle)
        assert outcome.disposition == "failed"
        assert outcome.exit_code == 1

    def test_missing_observation_file(self, tmp_path):
        handle, _ = spawn(tmp_path, "pass")
        outcome = collect(handle)
        assert outcome.disposition == "failed"
        assert outcome.reason == "missing observation"

    def test_non_finite_metric(self, tmp_path):
        code = (
            "import os;"
            "open(os.environ['ORCHESTRATE_OBSERVATION_FILE'], 'w').write('{\"value\": \"NaN\"}')"
        )
        handle, _ = spawn(tmp_path, code)
        outcome = collect(handle)
        assert (outcome.disposition, outcome.reason) == ("failed", "non-finite metric")

    def test_explicit_failed_flag_overrides_exit_zero(self, tmp_path):
        code = (
            "import json, os;"
            "json.dump({'failed': True}, open(os.environ['ORCHESTRATE_OBSERVATION_FILE'], 'w'))"
        )
        handle, _ = spawn(tmp_path, code)
        assert collect(handle).disposition == "failed"

    def test_gpu_slots_env(self, tmp_path):
        code = (
            "import json, os;"
            "json.dump({'value': 1}, open(os.environ['ORCHESTRATE_OBSERVATION_FILE'], 'w'));"
            "print(os.environ['ORCHESTRATE_ASSIGNED_GPUS'])"
        )
        handle, collector = spawn(tmp_path, code, gpu_slots=[1, 3])
        collect(handle)
        assert collector.lines("stdout") == ["1,3"]

    def test_identity_env_vars(self, tmp_path):
        code = (
            "import json, os;"
            "json.dump({'value': 1}, open(os.environ['ORCHESTRATE_OBSERVATION_FILE'], 'w'));"
            "print(os.environ['ORCHESTRATE_EXPERIMENT_ID'], os.environ['ORCHESTRATE_RUN_ID'])"
        )
        handle, collector = spawn(tmp_path, code)
        collect(handle)
        assert collector.lines("stdout") == ["e1 r1"]

    def test_spawn_error(self, tmp_path):
        collector = Collector()
        spec = RunSpec(command=["/nonexistent-binary"])
        with pytest.raises(UserError, match="spawn error"):
            launch("r1", "e1", {}, spec, [], tmp_path / "r1", collector.sink)

    def test_empty_command_rejected(self):
        with pytest.raises(UserError, match="non-empty"):
            RunSpec(command=[])


class TestLogs:
    def test_three_lines_sequenced(self, tmp_path):
        handle, collector = spawn(tmp_path, "print('a'); print('b'); print('c')")
        collect(handle)
        stdout = [(r[1], r[3]) for r in collector.records if r[0] == "stdout"]
        assert stdout == [(0, "a"), (1, "b"), (2, "c")]

    def test_streams_independently_ordered(self, tmp_path):
        code = (
            "import sys;"
            "print('out0'); print('err0', file=sys.stderr);"
            "print('out1'); print('err1', file=sys.stderr)"
        )
        handle, collector = spawn(tmp_path, code)
        collect(handle)
        assert collector.lines("stdout") == ["out0", "out1"]
        assert collector.lines("stderr") == ["err0", "err1"]

    def test_concurrent_runs_no_cross_contamination(self, tmp_path):
        results = {}
        for run_id in ("ra", "rb"):
            code = f"print('{run_id}-stamp'); print('{run_id}-stamp')"
            results[run_id] = spawn(tmp_path, code, run_id=run_id)
        for run_id, (handle, collector) in results.items():
            collect(handle)
            assert collector.lines() == [f"{run_id}-stamp"] * 2

    def test_log_completeness(self, tmp_path):
        n = 200
        handle, collector = spawn(tmp_path, f"[print(i) for i in range({n})]")
        collect(handle)
        assert len(collector.lines("stdout")) == n

    def test_long_line_truncated(self, tmp_path):
        handle, collector = spawn(tmp_path, "print('x' * (1 << 21))")
        collect(handle)
        (line,) = collector.lines("stdout")
        assert line.endswith("[truncated]")
        assert len(line) <= (1 << 20) + 32


class TestKill:
    def test_timeout_kills(self, tmp_path):
        handle, _ = spawn(tmp_path, "import time; time.sleep(60)", timeout=0.3)
        outcome = collect(handle, grace_period=0.5)
        assert (outcome.disposition, outcome.reason) == ("killed", "timeout")
        assert outcome.duration < 5

    def test_kill_responsiveness_and_no_orphans(self, tmp_path):
        # The child spawns a grandchild; killing the group must reap both
        # within 2x the grace period.
        code = (
            "import subprocess, sys, time;"
            "p = subprocess.Popen([sys.executable, '-c', 'import time; time.sleep(120)']);"
            "print('child', p.pid, flush=True); time.sleep(120)"
        )
        handle, collector = spawn(tmp_path, code)
        deadline = time.time() + 5
        while not collector.lines("stdout") and time.time() < deadline:
            time.sleep(0.02)
        grandchild_pid = int(collector.lines("stdout")[0].split()[1])
        grace = 0.5
        start = time.time()
        handle.kill(grace_period=grace)
        outcome = collect(handle, grace_period=grace)
        assert outcome.disposition == "killed"
        assert time.time() - start <= 2 * grace + 2
        time.sleep(0.2)
        # The whole process group must be dead; a lingering zombie awaiting
        # reaping by init is fine, a live sleep(120) is not.
        try:
            with open(f"/proc/{grandchild_pid}/stat") as fh:
                state = fh.read().rsplit(")", 1)[1].split()[0]
            assert state == "Z"
        except FileNotFoundError:
            pass

    def test_sigterm_ignoring_child_hard_killed(self, tmp_path):
        code = (
            "import signal, time;"
            "signal.signal(signal.SIGTERM, signal.SIG_IGN);"
            "print('ready', flush=True); time.sleep(120)"
        )
        handle, collector = spawn(tmp_path, code)
        deadline = time.time() + 5
        while not collector.lines("stdout") and time.time() < deadline:
            time.sleep(0.02)
        start = time.time()
        handle.kill(grace_period=0.3)
        outcome = collect(handle, grace_period=0.3)
        assert outcome.disposition == "killed"
        assert time.time() - start < 5


class TestSynthetic:
    def test_quadratic_at_optimum(self):
        outcome = synthetic_execute(
            {"x": 0.3}, "negated_quadratic", {"center": {"x": 0.3}}
        )
        assert outcome.value == 0.0

    def test_quadratic_off_center(self):
        outcome = synthetic_execute(
            {"x": 0.8}, "negated_quadratic", {"center": {"x": 0.3}}
        )
        assert outcome.value == pytest.approx(-0.25)

    def test_sphere(self):
        assert synthetic_execute({"x": 2.0, "y": 1.0}, "sphere").value == -5.0

    def test_step_failure(self):
        outcome = synthetic_execute(
            {"x": 0.05}, "step_failure", {"param": "x", "fail_below": 0.1}
        )
        assert outcome.disposition == "failed"
        ok = synthetic_execute({"x": 0.5}, "step_failure", {"param": "x", "fail_below": 0.1})
        assert ok.value == 0.5

    def test_unknown_objective(self):
        with pytest.raises(UserError, match="unknown synthetic objective"):
            synthetic_execute({"x": 1.0}, "rosenbrock")


def test_outcome_invariants():
    with pytest.raises(ValueError):
        Outcome("succeeded")
    with pytest.raises(ValueError):
        Outcome("failed", value=1.0)
