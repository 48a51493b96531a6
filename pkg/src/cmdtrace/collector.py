"""Ingestion server: accepts Syslog frames, commits records, feeds subscribers.

Listeners: UDP (one frame per datagram) and TCP (octet-counted frames,
optionally TLS). Each committed TCP frame is answered with an ``OK`` line so
senders can retransmit anything unacknowledged; a frame that can never commit
is answered with ``ERR`` so senders do not retry poison input. Malformed
input is counted and dropped, never fatal.

A collector can also run in relay mode: every record it commits is re-framed
and forwarded upstream with the same at-least-once contract, buffering in
memory while the upstream is down (bounded, drop-oldest).
"""

from __future__ import annotations

import logging
import queue
import socket
import ssl
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import timezone

from cmdtrace.records import (
    DEFAULT_TZ,
    CommandRecord,
    MalformedLine,
    parse_local_line,
    parse_payload,
    render_local_line,
    with_timestamp,
)
from cmdtrace.store import Broadcast, CentralStore, CommitResult, StreamEvent
from cmdtrace.wire import (
    DEFAULT_PRI,
    FrameStreamReader,
    MalformedFrame,
    encode_octet_counted,
    parse_frame,
    render_frame,
    split_mac,
    verify_and_strip_mac,
)

log = logging.getLogger(__name__)

__all__ = [
    "CollectorServer",
    "Forwarder",
    "MalformedPayload",
    "ingest_frame",
    "record_frame",
]

_MONTH_PREFIXES = ("Jan", "Feb", "Mar", "Apr", "May", "Jun",
                   "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")


class MalformedPayload(ValueError):
    """The frame's message is not a command log payload."""


def ingest_frame(data: bytes, *, hmac_key: bytes | None = None,
                 tz: timezone = DEFAULT_TZ) -> CommandRecord:
    """Parse one complete frame into a CommandRecord.

    The envelope's timestamp and hostname are authoritative: when the payload
    disagrees, the envelope wins. Raises MalformedFrame or MalformedPayload.
    """
    frame = parse_frame(data)
    msg = frame.msg
    if hmac_key is not None:
        msg = verify_and_strip_mac(msg, hmac_key)
    else:
        msg, _ = split_mac(msg)
    try:
        if msg.startswith(_MONTH_PREFIXES):
            record = parse_local_line(msg, tz=tz)
        else:
            if frame.timestamp is None:
                raise MalformedPayload("no timestamp in envelope or payload")
            record = parse_payload(msg, frame.timestamp)
    except MalformedLine as e:
        raise MalformedPayload(str(e)) from None
    if frame.timestamp is not None and record.timestamp != frame.timestamp:
        record = with_timestamp(record, frame.timestamp)
    if frame.hostname is not None and record.hostname != frame.hostname:
        record = CommandRecord(
            timestamp=record.timestamp, username=record.username,
            hostname=frame.hostname, ip=record.ip, wd=record.wd,
            cmd=record.cmd, cmd_type=record.cmd_type,
            sandbox_id=record.sandbox_id,
        ).validate()
    return record


def record_frame(record: CommandRecord, *, pri: int = DEFAULT_PRI,
                 hmac_key: bytes | None = None) -> bytes:
    """Frame a record for transport: envelope from the record, full line as payload."""
    return render_frame(
        render_local_line(record),
        timestamp=record.timestamp,
        hostname=record.hostname,
        pri=pri,
        hmac_key=hmac_key,
    )


@dataclass
class CollectorStats:
    frames: int = 0
    malformed_frames: int = 0
    malformed_payloads: int = 0
    commits: int = 0
    duplicates: int = 0


class CollectorServer:
    """UDP/TCP(/TLS) listeners in front of a CentralStore and a Broadcast bus.

    ``enricher``, when set, maps a freshly committed (record, seq) to extra
    StreamEvents (findings, achieved steps) published right after the command
    event; the service layer installs it.
    """

    def __init__(self, store: CentralStore, *,
                 udp_addr: tuple[str, int] | None = None,
                 tcp_addr: tuple[str, int] | None = None,
                 tls_addr: tuple[str, int] | None = None,
                 tls_cert: str | None = None,
                 tls_key: str | None = None,
                 hmac_key: bytes | None = None,
                 tz: timezone = DEFAULT_TZ,
                 bus: Broadcast | None = None,
                 enricher=None):
        self.store = store
        self.bus = bus or Broadcast()
        self.hmac_key = hmac_key
        self.tz = tz
        self.enricher = enricher
        self.stats = CollectorStats()
        self._udp_addr = udp_addr
        self._tcp_addr = tcp_addr
        self._tls_addr = tls_addr
        self._tls_cert = tls_cert
        self._tls_key = tls_key
        self._threads: list[threading.Thread] = []
        self._sockets: list[socket.socket] = []
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._running = threading.Event()
        self.udp_port: int | None = None
        self.tcp_port: int | None = None
        self.tls_port: int | None = None

    # -- lifecycle ----------------------------------------------------------

    def start(self):
        self._running.set()
        if self._udp_addr:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.bind(self._udp_addr)
            self.udp_port = sock.getsockname()[1]
            self._sockets.append(sock)
            self._spawn(self._udp_loop, sock)
        if self._tcp_addr:
            sock = self._listen(self._tcp_addr)
            self.tcp_port = sock.getsockname()[1]
            self._spawn(self._accept_loop, sock, None)
        if self._tls_addr:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.load_cert_chain(self._tls_cert, self._tls_key)
            sock = self._listen(self._tls_addr)
            self.tls_port = sock.getsockname()[1]
            self._spawn(self._accept_loop, sock, ctx)
        return self

    def _listen(self, addr: tuple[str, int]) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind(addr)
        sock.listen(64)
        self._sockets.append(sock)
        return sock

    def _spawn(self, fn, *args):
        t = threading.Thread(target=fn, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self):
        self._running.clear()
        with self._conns_lock:
            conns = list(self._conns)
        for sock in conns + self._sockets:
            try:
                sock.close()
            except OSError:
                pass
        self._sockets.clear()
        for t in self._threads:
            t.join(timeout=2)
        self._threads.clear()

    # -- ingest paths --------------------------------------------------------

    def commit_record(self, record: CommandRecord) -> CommitResult:
        """Commit and publish one record; the single entry point for all listeners."""
        result = self.store.commit(record)
        self.stats.commits += 1
        if result.duplicate:
            self.stats.duplicates += 1
            return result
        self.bus.publish(StreamEvent(
            kind="command", sandbox_id=record.sandbox_id, seq=result.sequence_no,
            payload={"record": record, "seq": result.sequence_no},
        ))
        if self.enricher is not None:
            for event in self.enricher(record, result.sequence_no):
                self.bus.publish(event)
        return result

    def _handle_frame(self, data: bytes) -> bool:
        """True when the frame committed (or was a duplicate)."""
        self.stats.frames += 1
        try:
            record = ingest_frame(data, hmac_key=self.hmac_key, tz=self.tz)
        except MalformedFrame as e:
            self.stats.malformed_frames += 1
            log.warning("malformed frame: %s", e)
            return False
        except (MalformedPayload, ValueError) as e:
            self.stats.malformed_payloads += 1
            log.warning("malformed payload: %s", e)
            return False
        self.commit_record(record)
        return True

    def _udp_loop(self, sock: socket.socket):
        while self._running.is_set():
            try:
                data, _ = sock.recvfrom(65535)
            except OSError:
                return
            self._handle_frame(data)

    def _accept_loop(self, sock: socket.socket, tls_ctx: ssl.SSLContext | None):
        while self._running.is_set():
            try:
                conn, _ = sock.accept()
            except OSError:
                return
            self._spawn(self._conn_loop, conn, tls_ctx)

    def _conn_loop(self, conn: socket.socket, tls_ctx: ssl.SSLContext | None):
        try:
            if tls_ctx is not None:
                conn = tls_ctx.wrap_socket(conn, server_side=True)
            with self._conns_lock:
                self._conns.add(conn)
            reader = FrameStreamReader()
            while self._running.is_set():
                data = conn.recv(65536)
                if not data:
                    return
                try:
                    frames = reader.feed(data)
                except MalformedFrame:
                    self.stats.malformed_frames += 1
                    return  # framing lost; drop the connection
                for frame in frames:
                    # Ack only after the commit is durable; on IO errors the
                    # connection dies unacknowledged and the sender retries.
                    ok = self._handle_frame(frame)
                    conn.sendall(b"OK\n" if ok else b"ERR\n")
        except (OSError, ssl.SSLError):
            pass
        finally:
            with self._conns_lock:
                self._conns.discard(conn)
            try:
                conn.close()
            except OSError:
                pass


class Forwarder:
    """Relay: re-frames committed records and ships them upstream in order.

    Keeps a bounded in-memory buffer while the upstream is down; when full,
    the oldest records are dropped and counted. Reconnects with exponential
    backoff (base 100 ms, cap 5 s) and never gives up.
    """

    def __init__(self, upstream: tuple[str, int], *, capacity: int = 100_000,
                 pri: int = DEFAULT_PRI, hmac_key: bytes | None = None,
                 backoff_base: float = 0.1, backoff_cap: float = 5.0,
                 ack_timeout: float = 5.0):
        self.upstream = upstream
        self.capacity = capacity
        self.pri = pri
        self.hmac_key = hmac_key
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.ack_timeout = ack_timeout
        self.dropped = 0
        self.forwarded = 0
        self._buf: deque[CommandRecord] = deque()
        self._cond = threading.Condition()
        self._sock: socket.socket | None = None
        self._running = threading.Event()
        self._thread: threading.Thread | None = None
        self._pump_thread: threading.Thread | None = None
        self._sub = None

    def enqueue(self, record: CommandRecord, seq: int = 0):
        with self._cond:
            if len(self._buf) >= self.capacity:
                self._buf.popleft()
                self.dropped += 1
            self._buf.append(record)
            self._cond.notify()

    def attach(self, server: CollectorServer):
        """Forward every record the server commits; takes effect on start()."""
        self._sub = server.bus.subscribe()
        return self

    def _pump(self):
        while self._running.is_set():
            try:
                event = self._sub.get(timeout=0.2)
            except queue.Empty:
                continue
            if event is not None and event.kind == "command":
                self.enqueue(event.payload["record"])

    def start(self):
        self._running.set()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        if self._sub is not None:
            self._pump_thread = threading.Thread(target=self._pump, daemon=True)
            self._pump_thread.start()
        return self

    def stop(self):
        self._running.clear()
        with self._cond:
            self._cond.notify_all()
        if self._thread:
            self._thread.join(timeout=3)
        if self._pump_thread:
            self._pump_thread.join(timeout=3)
        self._close()

    def wait_drained(self, timeout: float = 30.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._cond:
                if not self._buf:
                    return True
            time.sleep(0.02)
        return False

    @property
    def backlog(self) -> int:
        with self._cond:
            return len(self._buf)

    def _close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None

    def _connect(self) -> bool:
        try:
            sock = socket.create_connection(self.upstream, timeout=self.ack_timeout)
            sock.settimeout(self.ack_timeout)
            self._sock = sock
            return True
        except OSError:
            return False

    def _run(self):
        backoff = self.backoff_base
        while self._running.is_set():
            with self._cond:
                while not self._buf and self._running.is_set():
                    self._cond.wait(timeout=0.2)
                if not self._running.is_set():
                    return
                record = self._buf[0]
            if self._sock is None and not self._connect():
                time.sleep(min(backoff, self.backoff_cap))
                backoff = min(backoff * 2, self.backoff_cap)
                continue
            try:
                frame = record_frame(record, pri=self.pri, hmac_key=self.hmac_key)
                self._sock.sendall(encode_octet_counted(frame))
                ack = self._recv_ack()
            except OSError:
                self._close()
                time.sleep(min(backoff, self.backoff_cap))
                backoff = min(backoff * 2, self.backoff_cap)
                continue
            backoff = self.backoff_base
            if ack in (b"OK", b"ERR"):
                # ERR means the upstream can never commit it; drop rather than loop.
                with self._cond:
                    if self._buf and self._buf[0] is record:
                        self._buf.popleft()
                self.forwarded += 1
            else:
                self._close()

    def _recv_ack(self) -> bytes:
        buf = b""
        while b"\n" not in buf:
            chunk = self._sock.recv(16)
            if not chunk:
                raise OSError("connection closed before ack")
            buf += chunk
        return buf.split(b"\n", 1)[0]
