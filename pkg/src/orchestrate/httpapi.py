"""Loopback HTTP control API for one controller.

Endpoints (all JSON unless noted):

    POST /v1/experiments                   create; body = experiment config
    GET  /v1/experiments                   list status summaries
    GET  /v1/experiments/{id}              StatusReport
    POST /v1/experiments/{id}/stop         stop + report (idempotent)
    GET  /v1/experiments/{id}/logs         NDJSON stream; ?follow=1&since_seq=N
    GET  /v1/cluster/status                ClusterStatusReport
    GET  /v1/events?since=N&timeout_ms=M   long-poll event batch
    POST /v1/shutdown                      kill runs, flush, exit serve loop
    GET  /ui/...                           dashboard static assets

No auth, no TLS: loopback only by design.
"""

from __future__ import annotations

import json
import mimetypes
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .controller import Controller, ControllerConfig
from .errors import NotFoundError, UserError
from .store import StateRoot

ENV_UI_DIR = "ORCHESTRATE_UI_DIR"


def _default_ui_dir() -> Optional[Path]:
    env = os.environ.get(ENV_UI_DIR)
    if env:
        return Path(env)
    packaged = Path(__file__).parent / "ui"
    return packaged if packaged.is_dir() else None


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "orchestrate"

    # Quiet by default; the controller log file captures stderr anyway.
    def log_message(self, fmt, *args):
        pass

    @property
    def ctl(self) -> Controller:
        return self.server.controller  # type: ignore[attr-defined]

    def _send_json(self, payload, status: int = 200) -> None:
        body = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _send_error_json(self, exc: Exception) -> None:
        if isinstance(exc, NotFoundError):
            status = 404
        elif isinstance(exc, UserError):
            status = 400
        else:
            status = 500
        self._send_json({"error": str(exc)}, status=status)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length) if length else b"{}"
        try:
            return json.loads(raw or b"{}")
        except json.JSONDecodeError as e:
            raise UserError(f"invalid JSON body: {e}") from e

    # -- routing -----------------------------------------------------------

    def do_GET(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        try:
            if parts == ["v1", "cluster", "status"]:
                return self._send_json(self.ctl.cluster_status())
            if parts == ["v1", "experiments"]:
                return self._send_json({"experiments": self.ctl.list_experiments()})
            if len(parts) == 3 and parts[:2] == ["v1", "experiments"]:
                return self._send_json(self.ctl.get_status(parts[2]))
            if len(parts) == 4 and parts[:2] == ["v1", "experiments"] and parts[3] == "logs":
                return self._stream_logs(parts[2], query)
            if parts == ["v1", "events"]:
                since = int(query.get("since", -1))
                timeout = int(query.get("timeout_ms", 0)) / 1000.0
                events = self.ctl.get_events(since=since, timeout=timeout)
                return self._send_json({"events": events})
            if parts and parts[0] == "ui":
                return self._serve_ui(parts[1:])
            raise NotFoundError(f"no such endpoint: {url.path}")
        except BrokenPipeError:
            pass
        except Exception as e:  # noqa: BLE001 - boundary: everything becomes a response
            try:
                self._send_error_json(e)
            except BrokenPipeError:
                pass

    def do_POST(self):
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        try:
            if parts == ["v1", "experiments"]:
                config = self._read_body()
                experiment_id = self.ctl.create_experiment(config)
                return self._send_json({"experiment_id": experiment_id}, status=201)
            if len(parts) == 4 and parts[:2] == ["v1", "experiments"] and parts[3] == "stop":
                return self._send_json(self.ctl.stop_experiment(parts[2]))
            if parts == ["v1", "shutdown"]:
                self._send_json({"ok": True})
                threading.Thread(
                    target=self.server.initiate_shutdown, daemon=True  # type: ignore[attr-defined]
                ).start()
                return None
            raise NotFoundError(f"no such endpoint: {url.path}")
        except Exception as e:  # noqa: BLE001
            try:
                self._send_error_json(e)
            except BrokenPipeError:
                pass

    # -- streaming ------------------------------------------------------------

    def _stream_logs(self, experiment_id: str, query: dict) -> None:
        follow = query.get("follow", "") in ("1", "true", "yes")
        since_seq = int(query.get("since_seq", -1))
        iterator = self.ctl.iter_logs(experiment_id, follow=follow, since_seq=since_seq)
        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Transfer-Encoding", "chunked")
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()

        def write_chunk(data: bytes) -> None:
            self.wfile.write(f"{len(data):x}\r\n".encode() + data + b"\r\n")
            self.wfile.flush()

        try:
            for record in iterator:
                write_chunk((json.dumps(record.to_dict()) + "\n").encode())
            write_chunk(b"")
        except BrokenPipeError:
            pass
        finally:
            iterator.close()

    def _serve_ui(self, rel_parts: list) -> None:
        ui_dir = _default_ui_dir()
        if ui_dir is None:
            raise NotFoundError("dashboard assets not installed")
        rel = "/".join(rel_parts) or "index.html"
        path = (ui_dir / rel).resolve()
        if not str(path).startswith(str(ui_dir.resolve())) or not path.is_file():
            raise NotFoundError(f"no such asset: {rel}")
        body = path.read_bytes()
        self.send_response(200)
        ctype = mimetypes.guess_type(str(path))[0] or "application/octet-stream"
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class ControllerServer:
    """Binds a Controller to an HTTP port and records the endpoint."""

    def __init__(self, root: StateRoot, cluster_name: str,
                 config: Optional[ControllerConfig] = None):
        self.config = config or ControllerConfig()
        self.controller = Controller(root, cluster_name, self.config)
        self._check_not_already_served()
        try:
            self.httpd = ThreadingHTTPServer((self.config.host, self.config.port), _Handler)
        except OSError:
            # Port conflict: fall back to an ephemeral port.
            self.httpd = ThreadingHTTPServer((self.config.host, 0), _Handler)
        self.httpd.daemon_threads = True
        self.httpd.controller = self.controller  # type: ignore[attr-defined]
        self.httpd.initiate_shutdown = self.initiate_shutdown  # type: ignore[attr-defined]
        self._done = threading.Event()
        self._thread: Optional[threading.Thread] = None

        host, port = self.httpd.server_address[:2]
        self.endpoint = f"{host}:{port}"
        cluster = self.controller.cluster
        cluster.controller_endpoint = self.endpoint
        cluster.controller_pid = os.getpid()
        self.controller.provider.save_cluster(cluster)
        self.controller.start_autoscaler()

    def _check_not_already_served(self) -> None:
        endpoint = self.controller.cluster.controller_endpoint
        if endpoint and _endpoint_alive(endpoint):
            raise UserError(
                f"controller already running for cluster "
                f"{self.controller.cluster.name} at {endpoint}"
            )

    def start_background(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        try:
            self.httpd.serve_forever()
        finally:
            self.controller.shutdown()

    def initiate_shutdown(self) -> None:
        self.controller.shutdown()
        self.httpd.shutdown()
        self._done.set()

    def close(self) -> None:
        self.initiate_shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=10)


def _endpoint_alive(endpoint: str) -> bool:
    import requests

    try:
        r = requests.get(f"http://{endpoint}/v1/cluster/status", timeout=1)
        return r.status_code == 200
    except requests.RequestException:
        return False
