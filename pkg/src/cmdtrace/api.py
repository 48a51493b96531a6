"""HTTP query API and live event stream over a central store.

Read endpoints serve JSON snapshots of the store; /stream is a long-lived
server-sent-events response fed by the collector's broadcast bus, with
``Last-Event-ID`` catch-up so a reconnecting client misses nothing that was
durably committed. LiveAnalyzer keeps per-sandbox detector automata and
achieved-step sets warm so the live view matches post-hoc analysis.
"""

from __future__ import annotations

import json
import queue
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from cmdtrace.analytics import EmptyCommand, normalize
from cmdtrace.detectors import MsfSessionState, OutOfOrderRecord, evaluate, evaluate_session
from cmdtrace.progress import ScenarioSpec, map_session, match_command, timeline
from cmdtrace.records import CommandRecord
from cmdtrace.report import (
    build_report,
    finding_json,
    graph_json,
    record_json,
    timeline_json,
)
from cmdtrace.store import Broadcast, CentralStore, StreamEvent

__all__ = [
    "ApiServer",
    "BindFailure",
    "LiveAnalyzer",
    "ServiceHandle",
    "start_service",
]


class BindFailure(OSError):
    pass


class LiveAnalyzer:
    """Maps each committed (record, seq) to derived finding/step events.

    The same rule automaton and step matchers as the batch path, folded
    incrementally; a record arriving out of timestamp order skips the rules
    rather than poisoning the stream.
    """

    def __init__(self, scenario: ScenarioSpec):
        self.scenario = scenario
        self._msf: dict[str, MsfSessionState] = {}
        self._achieved: dict[str, set[str]] = {}
        self._lock = threading.Lock()

    def prewarm(self, store: CentralStore):
        for sid in store.sandboxes():
            for seq, record in enumerate(store.read(sid), start=1):
                self(record, seq)

    def __call__(self, record: CommandRecord, seq: int) -> list[StreamEvent]:
        events: list[StreamEvent] = []
        with self._lock:
            state = self._msf.setdefault(record.sandbox_id, MsfSessionState())
            try:
                findings = evaluate(record, state, self.scenario.context, seq=seq)
            except OutOfOrderRecord:
                findings = []
            for f in findings:
                events.append(StreamEvent(
                    kind="finding", sandbox_id=record.sandbox_id, seq=seq,
                    payload=finding_json(f)))
            try:
                nc = normalize(record.cmd)
            except EmptyCommand:
                return events
            achieved = self._achieved.setdefault(record.sandbox_id, set())
            for step in self.scenario.steps:
                if step.step_id not in achieved and match_command(nc, step.matcher):
                    achieved.add(step.step_id)
                    events.append(StreamEvent(
                        kind="step", sandbox_id=record.sandbox_id, seq=seq,
                        payload={"step_id": step.step_id, "seq": seq,
                                 "timestamp": record.timestamp.isoformat()}))
        return events


def _parse_since(raw: str) -> datetime | int:
    body = raw[1:] if raw[:1] in "+-" else raw
    if body.isdigit():
        return int(raw)
    ts = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


class _Handler(BaseHTTPRequestHandler):
    server: "ApiServer"

    def log_message(self, *args):      # quiet by default
        pass

    # -- plumbing -------------------------------------------------------------

    def _cors_headers(self):
        origin = self.headers.get("Origin")
        allowed = self.server.api.cors_origins
        if origin and ("*" in allowed or origin in allowed):
            self.send_header("Access-Control-Allow-Origin", origin)
            self.send_header("Vary", "Origin")

    def _send_json(self, status: int, body):
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self._cors_headers()
        self.end_headers()
        self.wfile.write(data)

    def _error(self, status: int, message: str):
        self._send_json(status, {"error": message})

    # -- routing --------------------------------------------------------------

    def do_OPTIONS(self):
        self.send_response(204)
        self._cors_headers()
        self.send_header("Access-Control-Allow-Methods", "GET, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Last-Event-ID")
        self.end_headers()

    def do_GET(self):
        url = urlsplit(self.path)
        query = {k: v[-1] for k, v in parse_qs(url.query).items()}
        parts = [p for p in url.path.split("/") if p]
        try:
            if parts == ["api", "sandboxes"]:
                return self._send_json(200, self.server.api.store.sandboxes())
            if parts == ["api", "stats"]:
                return self._send_json(200, self.server.api.stats())
            if len(parts) == 4 and parts[:2] == ["api", "sandboxes"]:
                return self._sandbox_endpoint(parts[2], parts[3], query)
            if parts == ["stream"]:
                return self._stream(query)
        except BrokenPipeError:
            raise
        except Exception as e:                    # defensive: JSON 500, not a stack trace
            return self._error(500, f"{type(e).__name__}: {e}")
        self._error(404, f"no such endpoint: {url.path}")

    def _sandbox_endpoint(self, sandbox_id: str, leaf: str, query: dict):
        api = self.server.api
        result = api.store.read(sandbox_id)
        if not result.known:
            return self._error(404, f"unknown sandbox: {sandbox_id}")
        records = list(result)
        if leaf == "commands":
            pairs = list(enumerate(records, start=1))
            if "since" in query:
                try:
                    since = _parse_since(query["since"])
                except ValueError:
                    return self._error(400, f"bad since value: {query['since']}")
                if isinstance(since, datetime):
                    pairs = [(i, r) for i, r in pairs if r.timestamp >= since]
                else:
                    pairs = [(i, r) for i, r in pairs if i > since]
            return self._send_json(200, [record_json(r, seq=i) for i, r in pairs])
        if leaf == "findings":
            findings, _ = evaluate_session(records, api.scenario.context)
            return self._send_json(200, [finding_json(f) for f in findings])
        if leaf == "progress":
            findings, _ = evaluate_session(records, api.scenario.context)
            graph = map_session(records, api.scenario, findings=findings)
            return self._send_json(200, graph_json(graph, api.scenario))
        if leaf == "timeline":
            findings, _ = evaluate_session(records, api.scenario.context)
            graph = map_session(records, api.scenario, findings=findings)
            return self._send_json(
                200, timeline_json(timeline(records, findings, graph)))
        return self._error(404, f"no such endpoint: {leaf}")

    # -- stream ---------------------------------------------------------------

    def _write_event(self, event: StreamEvent):
        if event.kind == "command":
            body = record_json(event.payload["record"], seq=event.seq)
        else:
            body = event.payload
        chunk = (f"id: {event.sandbox_id}:{event.seq}\n"
                 f"event: {event.kind}\n"
                 f"data: {json.dumps(body)}\n\n")
        self.wfile.write(chunk.encode("utf-8"))
        self.wfile.flush()

    def _stream(self, query: dict):
        api = self.server.api
        sandbox = query.get("sandbox", "all")
        wanted = None if sandbox == "all" else sandbox
        last_seq = 0
        last_id = self.headers.get("Last-Event-ID")
        if last_id and wanted is not None:
            sid, _, seq = last_id.rpartition(":")
            if sid == wanted and seq.isdigit():
                last_seq = int(seq)

        self.send_response(200)
        self.send_header("Content-Type", "text/event-stream")
        self.send_header("Cache-Control", "no-cache")
        self._cors_headers()
        self.end_headers()

        sub = api.bus.subscribe(wanted)
        try:
            # Catch-up from the durable store before draining the live feed.
            if wanted is not None:
                for seq, record in enumerate(api.store.read(wanted), start=1):
                    if seq > last_seq:
                        self._write_event(StreamEvent(
                            kind="command", sandbox_id=wanted, seq=seq,
                            payload={"record": record, "seq": seq}))
                        last_seq = seq
            while not api.stopping.is_set():
                try:
                    event = sub.get(timeout=api.heartbeat)
                except queue.Empty:
                    self.wfile.write(b": hb\n\n")
                    self.wfile.flush()
                    continue
                if event is None:
                    break
                if event.kind == "command" and wanted is not None and event.seq <= last_seq:
                    continue               # already sent during catch-up
                self._write_event(event)
                if event.kind == "command" and wanted is not None:
                    last_seq = event.seq
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            api.bus.unsubscribe(sub)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class ApiServer:
    """Serves the query endpoints and event stream for one store + scenario."""

    def __init__(self, store: CentralStore, scenario: ScenarioSpec, *,
                 bus: Broadcast, host: str = "127.0.0.1", port: int = 0,
                 cors_origins: tuple[str, ...] = (), heartbeat: float = 15.0):
        self.store = store
        self.scenario = scenario
        self.bus = bus
        self.cors_origins = tuple(cors_origins)
        self.heartbeat = heartbeat
        self.stopping = threading.Event()
        try:
            self._httpd = _Server((host, port), _Handler)
        except OSError as e:
            raise BindFailure(f"cannot bind {host}:{port}: {e}") from None
        self._httpd.api = self
        self.host, self.port = self._httpd.server_address[:2]
        self._thread: threading.Thread | None = None

    def stats(self) -> dict:
        doc = build_report(self.store, self.scenario)
        return {k: doc[k] for k in
                ("sandboxes", "commands", "gaps", "tool_frequency")}

    def start(self) -> "ApiServer":
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, kwargs={"poll_interval": 0.1},
            name="api-server", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.stopping.set()
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)


@dataclass
class ServiceHandle:
    """Everything `serve` runs: collector listeners, API, optional relay."""

    store: CentralStore
    collector: object
    api: ApiServer
    forwarder: object | None = None
    analyzer: LiveAnalyzer | None = None
    _stopped: threading.Event = field(default_factory=threading.Event)

    def stop(self):
        if self._stopped.is_set():
            return
        self._stopped.set()
        if self.forwarder is not None:
            self.forwarder.stop()
        self.api.stop()
        self.collector.stop()
        self.store.close()


def start_service(config) -> ServiceHandle:
    """Wire store + collector + live analysis + API from one ServiceConfig."""
    from cmdtrace.collector import CollectorServer, Forwarder
    from cmdtrace.progress import bundled_scenario_path, load_scenario

    store = CentralStore(config.store_dir)
    scenario = load_scenario(config.scenario_path or bundled_scenario_path())
    analyzer = LiveAnalyzer(scenario)
    analyzer.prewarm(store)
    bus = Broadcast()
    hmac_key = bytes.fromhex(config.hmac_key) if config.hmac_key else None
    collector = CollectorServer(
        store,
        udp_addr=(config.syslog_host, config.udp_port)
        if config.udp_port is not None else None,
        tcp_addr=(config.syslog_host, config.tcp_port)
        if config.tcp_port is not None else None,
        tls_addr=(config.syslog_host, config.tls_port)
        if config.tls_port is not None else None,
        tls_cert=config.tls_cert, tls_key=config.tls_key,
        hmac_key=hmac_key, bus=bus, enricher=analyzer,
    )
    forwarder = None
    if config.forward_to:
        host, _, port = config.forward_to.rpartition(":")
        forwarder = Forwarder((host, int(port)), hmac_key=hmac_key).attach(collector)
    api = ApiServer(store, scenario, bus=bus, host=config.api_host,
                    port=config.api_port, cors_origins=config.cors_origins,
                    heartbeat=config.heartbeat)
    collector.start()
    if forwarder is not None:
        forwarder.start()
    api.start()
    return ServiceHandle(store=store, collector=collector, api=api,
                         forwarder=forwarder, analyzer=analyzer)
