"""Sandbox-side emission: shell hook generation and trace replay.

Live capture uses bash's ``$PS0`` expansion: every time an interactive command
is about to run, a small function pulls the command text back out of
``history 1`` and hands a rendered log line to util-linux ``logger``, which
wraps it in a Syslog frame and ships it to the collector. Replay reads a
stored JSONL trace and plays it back over the same wire protocol, preserving
inter-command gaps (scaled by a speed factor) and retrying unacknowledged
frames so the collector sees every record at least once.
"""

from __future__ import annotations

import math
import socket
import ssl
import time
from dataclasses import dataclass, field

from cmdtrace.records import (
    LOCAL_LINE_TEMPLATE,
    CommandRecord,
    MalformedJson,
    parse_canonical_json,
)
from cmdtrace.wire import DEFAULT_PRI, encode_octet_counted
from cmdtrace.collector import record_frame

__all__ = [
    "HookConfig",
    "InvalidConfig",
    "MalformedTraceJson",
    "NonMonotonicTimestamps",
    "ReplayReport",
    "SendFailed",
    "SyslogSender",
    "Trace",
    "emit_hook_snippet",
    "load_trace",
    "replay_trace",
]

TRANSPORTS = ("udp", "tcp", "tcp-tls")


class InvalidConfig(ValueError):
    """Hook configuration that cannot produce a working emitter."""


@dataclass(frozen=True)
class HookConfig:
    """Where and how a sandbox ships its command lines."""

    sandbox_id: str
    host: str
    port: int = 5514
    transport: str = "udp"
    facility_priority: int = DEFAULT_PRI
    source_ip: str | None = None  # falls back to $CMDLOG_SRC_IP at runtime

    def validate(self) -> "HookConfig":
        if not self.sandbox_id or not all(
                c.isalnum() or c in "_-" for c in self.sandbox_id):
            raise InvalidConfig(f"bad sandbox_id: {self.sandbox_id!r}")
        if not self.host:
            raise InvalidConfig("host must be non-empty")
        if not 0 < self.port < 65536:
            raise InvalidConfig(f"port out of range: {self.port}")
        if self.transport not in TRANSPORTS:
            raise InvalidConfig(f"unknown transport: {self.transport!r}")
        if not 0 <= self.facility_priority <= 191:
            raise InvalidConfig(
                f"priority out of range: {self.facility_priority}")
        return self


def emit_hook_snippet(cfg: HookConfig) -> str:
    """Render the bash snippet that logs every interactive command.

    The payload template is built from the same LOCAL_LINE_TEMPLATE the
    parser consumes, with shell expansions standing in for each field, so the
    hook and the ingest grammar cannot drift apart. Output is deterministic
    for a given config. For tcp-tls the snippet still speaks plain TCP and
    expects a TLS-terminating proxy on localhost (util-linux logger does not
    do TLS itself).
    """
    cfg.validate()
    ip_expr = cfg.source_ip if cfg.source_ip is not None else "${CMDLOG_SRC_IP}"
    payload = LOCAL_LINE_TEMPLATE.format(
        username="$USER",
        hostname="$(hostname)",
        ip=ip_expr,
        wd="$__ctl_wd",
        cmd="$__ctl_cmd",
        cmd_type="bash-command",
        sandbox_id=cfg.sandbox_id,
    )
    transport_flag = "--udp" if cfg.transport == "udp" else "--tcp"
    lines = [
        "# command telemetry hook: paste into ~/.bashrc of the sandbox user",
        "__cmdtrace_log() {",
        "  local __ctl_cmd __ctl_wd",
        "  __ctl_cmd=$(HISTTIMEFORMAT= history 1 | sed 's/^ *[0-9]* *//')",
        '  [ -n "$__ctl_cmd" ] || return 0',
        '  __ctl_cmd=${__ctl_cmd//\\\\/\\\\\\\\}; __ctl_cmd=${__ctl_cmd//\\"/\\\\\\"}',
        '  __ctl_wd=${PWD//\\\\/\\\\\\\\}; __ctl_wd=${__ctl_wd//\\"/\\\\\\"}',
        f"  logger --server {cfg.host} --port {cfg.port} {transport_flag} \\",
        f"    --tag cmdlog --priority {cfg.facility_priority} -- \\",
        '    "' + payload.replace('"', '\\"') + '"',
        "}",
        "PS0='$(__cmdtrace_log)'",
    ]
    return "\n".join(lines) + "\n"


class MalformedTraceJson(MalformedJson):
    """A trace line failed to parse; carries its 1-based line number."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class NonMonotonicTimestamps(ValueError):
    def __init__(self, line_no: int):
        super().__init__(f"line {line_no}: timestamp earlier than previous line")
        self.line_no = line_no


@dataclass
class Trace:
    records: list[CommandRecord]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def sandbox_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.sandbox_id, None)
        return list(seen)

    @property
    def duration(self) -> float:
        if len(self.records) < 2:
            return 0.0
        return (self.records[-1].timestamp - self.records[0].timestamp).total_seconds()


def load_trace(path: str, *, allow_unsorted: bool = False) -> Trace:
    """Load a JSONL trace; rejects out-of-order timestamps unless allowed."""
    records: list[CommandRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = parse_canonical_json(line)
            except MalformedJson as e:
                raise MalformedTraceJson(line_no, str(e)) from None
            if (records and not allow_unsorted
                    and record.timestamp < records[-1].timestamp):
                raise NonMonotonicTimestamps(line_no)
            records.append(record)
    return Trace(records)


class SendFailed(RuntimeError):
    """A frame exhausted its retry budget or was rejected as poison."""


class SyslogSender:
    """Ships framed records with at-least-once semantics.

    UDP is fire-and-forget. TCP (optionally TLS) sends octet-counted frames
    and waits for the collector's per-frame OK line; anything unacknowledged
    is retransmitted on a fresh connection with exponential backoff (base
    100 ms, cap 5 s), up to ``budget`` attempts per frame. An ERR ack means
    the frame can never commit, so it fails immediately instead of retrying.
    """

    def __init__(self, host: str, port: int, *, transport: str = "udp",
                 pri: int = DEFAULT_PRI, hmac_key: bytes | None = None,
                 budget: int = 10, backoff_base: float = 0.1,
                 backoff_cap: float = 5.0, ack_timeout: float = 5.0,
                 tls_context: ssl.SSLContext | None = None):
        if transport not in TRANSPORTS:
            raise InvalidConfig(f"unknown transport: {transport!r}")
        self.host = host
        self.port = port
        self.transport = transport
        self.pri = pri
        self.hmac_key = hmac_key
        self.budget = budget
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.ack_timeout = ack_timeout
        if transport == "tcp-tls" and tls_context is None:
            tls_context = ssl.create_default_context()
        self.tls_context = tls_context
        self._sock: socket.socket | None = None
        self.retries = 0

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _connect(self):
        sock = socket.create_connection((self.host, self.port),
                                        timeout=self.ack_timeout)
        sock.settimeout(self.ack_timeout)
        if self.transport == "tcp-tls":
            sock = self.tls_context.wrap_socket(sock, server_hostname=self.host)
        self._sock = sock

    def send(self, record: CommandRecord):
        frame = record_frame(record, pri=self.pri, hmac_key=self.hmac_key)
        if self.transport == "udp":
            if self._sock is None:
                self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self._sock.sendto(frame, (self.host, self.port))
            return
        wire_bytes = encode_octet_counted(frame)
        backoff = self.backoff_base
        for attempt in range(self.budget):
            try:
                if self._sock is None:
                    self._connect()
                self._sock.sendall(wire_bytes)
                ack = self._recv_ack()
            except (OSError, ssl.SSLError):
                self.close()
                self.retries += 1
                time.sleep(min(backoff, self.backoff_cap))
                backoff = min(backoff * 2, self.backoff_cap)
                continue
            if ack == b"OK":
                return
            if ack == b"ERR":
                raise SendFailed("collector rejected frame")
            self.close()  # garbled ack: resync on a fresh connection
            self.retries += 1
        raise SendFailed(f"no ack after {self.budget} attempts")

    def _recv_ack(self) -> bytes:
        buf = b""
        while b"\n" not in buf:
            chunk = self._sock.recv(16)
            if not chunk:
                raise OSError("connection closed before ack")
            buf += chunk
        return buf.split(b"\n", 1)[0]


@dataclass
class ReplayReport:
    sent: int = 0
    failed: int = 0
    wall_time: float = 0.0
    speedup: float = 1.0
    failures: list[tuple[int, str]] = field(default_factory=list)


def replay_trace(trace: Trace, host: str, port: int, *,
                 transport: str = "tcp", speed: float = 1.0,
                 pri: int = DEFAULT_PRI, hmac_key: bytes | None = None,
                 tls_context: ssl.SSLContext | None = None) -> ReplayReport:
    """Play a trace against a collector, preserving gaps scaled by ``speed``.

    ``speed=2`` halves every inter-command gap; ``speed=math.inf`` sends
    back-to-back. Failures are recorded per-record (0-based index) and do not
    abort the replay.
    """
    if speed <= 0:
        raise ValueError("speed must be positive")
    report = ReplayReport(speedup=speed)
    start = time.monotonic()
    with SyslogSender(host, port, transport=transport, pri=pri,
                      hmac_key=hmac_key, tls_context=tls_context) as sender:
        prev = None
        for i, record in enumerate(trace):
            if prev is not None and not math.isinf(speed):
                gap = (record.timestamp - prev).total_seconds() / speed
                if gap > 0:
                    time.sleep(gap)
            prev = record.timestamp
            try:
                sender.send(record)
                report.sent += 1
            except SendFailed as e:
                report.failed += 1
                report.failures.append((i, str(e)))
    report.wall_time = time.monotonic() - start
    return report
