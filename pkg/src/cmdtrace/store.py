"""Central store: one append-only JSON-lines file per sandbox, plus fan-out.

Commits are durable (flushed and fsynced before they are acknowledged) and
idempotent: a record matching an already-committed one on
(timestamp, sandbox_id, hostname, cmd, wd) is acknowledged as a duplicate and
not re-appended. On open, existing files are re-indexed; a torn final line
(the tail of a write cut off by a crash) is truncated away, which is safe
because an unacknowledged record will be retransmitted.
"""

from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from cmdtrace.records import CommandRecord, MalformedJson, parse_canonical_json, to_canonical_json

__all__ = [
    "Broadcast",
    "CentralStore",
    "CommitResult",
    "ReadResult",
    "StoreError",
    "StreamEvent",
    "Subscription",
    "dedup_key",
]


def dedup_key(record: CommandRecord) -> tuple:
    """Identity under which commits are deduplicated."""
    return (record.timestamp, record.sandbox_id, record.hostname,
            record.cmd, record.wd)


class StoreError(Exception):
    """The store directory contains something we refuse to touch."""


@dataclass(frozen=True)
class CommitResult:
    sequence_no: int      # dense per sandbox, 1-based; existing seq for duplicates
    duplicate: bool


@dataclass
class ReadResult:
    """Records of one sandbox plus whether the sandbox exists at all."""

    records: list[CommandRecord]
    known: bool

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


class _Sandbox:
    __slots__ = ("fh", "records", "seen", "lock", "last_timestamp")

    def __init__(self):
        self.fh = None
        self.records: list[CommandRecord] = []
        self.seen: dict[tuple, int] = {}
        self.lock = threading.Lock()
        self.last_timestamp: datetime | None = None


class CentralStore:
    """Directory of ``sandbox<ID>.jsonl`` files, one canonical record per line."""

    def __init__(self, root_dir: str | os.PathLike, fsync: bool = True):
        self.root = Path(root_dir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._boxes: dict[str, _Sandbox] = {}
        self._registry_lock = threading.Lock()
        self._load_existing()

    # -- loading ----------------------------------------------------------

    def _path(self, sandbox_id: str) -> Path:
        return self.root / f"sandbox{sandbox_id}.jsonl"

    def _load_existing(self):
        for path in sorted(self.root.glob("sandbox*.jsonl")):
            sandbox_id = path.name[len("sandbox"):-len(".jsonl")]
            if not sandbox_id:
                continue
            self._boxes[sandbox_id] = self._load_file(path, sandbox_id)

    def _load_file(self, path: Path, sandbox_id: str) -> _Sandbox:
        box = _Sandbox()
        good_end = 0
        data = path.read_bytes()
        pos = 0
        while pos < len(data):
            nl = data.find(b"\n", pos)
            line = data[pos:] if nl < 0 else data[pos:nl]
            try:
                rec = parse_canonical_json(line.decode("utf-8"))
            except (MalformedJson, UnicodeDecodeError) as e:
                if nl < 0 or nl == len(data) - 1:
                    break  # torn tail; truncated below
                raise StoreError(f"{path}: corrupt line at byte {pos}: {e}") from None
            if rec.sandbox_id != sandbox_id:
                raise StoreError(
                    f"{path}: record for sandbox {rec.sandbox_id!r} in file for {sandbox_id!r}")
            if nl < 0:
                break  # complete JSON but no newline: treat as torn, rewrite on next commit
            box.records.append(rec)
            box.seen[dedup_key(rec)] = len(box.records)
            box.last_timestamp = rec.timestamp
            good_end = nl + 1
            pos = nl + 1
        else:
            good_end = len(data)
        if good_end != len(data):
            with open(path, "r+b") as fh:
                fh.truncate(good_end)
        return box

    def _box(self, sandbox_id: str, create: bool) -> _Sandbox | None:
        with self._registry_lock:
            box = self._boxes.get(sandbox_id)
            if box is None and create:
                box = _Sandbox()
                self._boxes[sandbox_id] = box
            return box

    # -- operations --------------------------------------------------------

    def commit(self, record: CommandRecord) -> CommitResult:
        """Durably append one record; duplicate commits are acknowledged, not stored."""
        record.validate()
        box = self._box(record.sandbox_id, create=True)
        key = dedup_key(record)
        with box.lock:
            existing = box.seen.get(key)
            if existing is not None:
                return CommitResult(existing, duplicate=True)
            if box.fh is None:
                box.fh = open(self._path(record.sandbox_id), "ab")
            box.fh.write(to_canonical_json(record).encode("utf-8") + b"\n")
            box.fh.flush()
            if self.fsync:
                os.fsync(box.fh.fileno())
            box.records.append(record)
            seq = len(box.records)
            box.seen[key] = seq
            box.last_timestamp = record.timestamp
            return CommitResult(seq, duplicate=False)

    def read(self, sandbox_id: str,
             since: datetime | int | None = None) -> ReadResult:
        """Records in commit order: timestamp >= since (instant) or seq > since (int)."""
        box = self._box(sandbox_id, create=False)
        if box is None:
            return ReadResult([], known=False)
        with box.lock:
            snapshot = list(box.records)
        if since is None:
            return ReadResult(snapshot, known=True)
        if isinstance(since, datetime):
            return ReadResult([r for r in snapshot if r.timestamp >= since], known=True)
        return ReadResult(snapshot[int(since):], known=True)

    def sandboxes(self) -> list[str]:
        with self._registry_lock:
            return sorted(self._boxes)

    def index(self) -> dict[str, tuple[int, datetime | None]]:
        """Per-sandbox (record_count, last_timestamp)."""
        out = {}
        with self._registry_lock:
            items = list(self._boxes.items())
        for sid, box in items:
            with box.lock:
                out[sid] = (len(box.records), box.last_timestamp)
        return out

    def record_count(self) -> int:
        return sum(n for n, _ in self.index().values())

    def close(self):
        with self._registry_lock:
            for box in self._boxes.values():
                if box.fh is not None:
                    box.fh.close()
                    box.fh = None


# -- live fan-out -----------------------------------------------------------


@dataclass(frozen=True)
class StreamEvent:
    """One event on the live stream: a committed record or something derived."""

    kind: str             # "command" | "finding" | "step"
    sandbox_id: str
    seq: int              # per-sandbox commit sequence of the originating record
    payload: dict


@dataclass
class Subscription:
    queue: "queue.Queue[StreamEvent | None]"
    sandbox_id: str | None = None     # None: all sandboxes
    closed: threading.Event = field(default_factory=threading.Event)

    def get(self, timeout: float | None = None) -> StreamEvent | None:
        return self.queue.get(timeout=timeout)


class Broadcast:
    """Fan-out of committed events; a slow subscriber is dropped, never blocks."""

    def __init__(self, queue_size: int = 10_000):
        self.queue_size = queue_size
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()

    def subscribe(self, sandbox_id: str | None = None) -> Subscription:
        sub = Subscription(queue.Queue(maxsize=self.queue_size), sandbox_id)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription):
        sub.closed.set()
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, event: StreamEvent):
        dead = []
        with self._lock:
            subs = list(self._subs)
        for sub in subs:
            if sub.sandbox_id is not None and sub.sandbox_id != event.sandbox_id:
                continue
            try:
                sub.queue.put_nowait(event)
            except queue.Full:
                dead.append(sub)
        for sub in dead:
            self.unsubscribe(sub)
