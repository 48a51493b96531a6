"""Command record model: the local key=value log line and the canonical JSON form.

One CommandRecord describes one shell command submitted on a sandboxed host,
together with its execution metadata. Two serializations exist:

* the *local line*, produced on the host by the shell hook, e.g.::

    Jul 03 2020 8:09:25 username="root" attacker src="10.1.135.83" wd="/home" \
cmd="nmap --help" cmd_type="bash-command" sid="1"

* the *canonical JSON* object stored centrally, one record per line, with a
  fixed key order and an ISO-8601 timestamp carrying a numeric UTC offset.

Both directions round-trip. The local line has no UTC offset, so parsing it
attaches a configured deployment-wide offset (all hosts run synchronized
clocks, so a single offset suffices).
"""

from __future__ import annotations

import ipaddress
import json
import re
from dataclasses import dataclass, replace
from datetime import datetime, timedelta, timezone

__all__ = [
    "CMD_TYPES",
    "DEFAULT_TZ",
    "LOCAL_LINE_TEMPLATE",
    "BadTimestamp",
    "CommandRecord",
    "InvalidRecord",
    "MalformedJson",
    "MalformedLine",
    "MissingField",
    "format_local_timestamp",
    "parse_canonical_json",
    "parse_local_line",
    "parse_payload",
    "render_local_line",
    "render_payload",
    "to_canonical_json",
]

CMD_TYPES = ("bash-command", "msf-command")

#: Offset attached to local lines when none is configured. Matches the
#: bundled sample data; deployments override it in the collector config.
DEFAULT_TZ = timezone(timedelta(hours=1))

#: Everything after the timestamp, in emission order. The shell hook and
#: render_local_line share this so both sides produce identical lines.
LOCAL_LINE_TEMPLATE = (
    'username="{username}" {hostname} src="{ip}" wd="{wd}" '
    'cmd="{cmd}" cmd_type="{cmd_type}" sid="{sandbox_id}"'
)

_MONTHS = ("Jan", "Feb", "Mar", "Apr", "May", "Jun",
           "Jul", "Aug", "Sep", "Oct", "Nov", "Dec")

_JSON_KEYS = ("timestamp", "username", "hostname", "ip", "wd",
              "cmd", "cmd_type", "sandbox_id")

_SANDBOX_ID_RE = re.compile(r"[A-Za-z0-9_-]+\Z")


class InvalidRecord(ValueError):
    """A CommandRecord field violates its invariant."""


class MalformedLine(ValueError):
    """A local log line does not match the grammar.

    ``offset`` is the byte offset (UTF-8) of the first violation.
    """

    def __init__(self, reason: str, offset: int):
        super().__init__(f"{reason} (byte offset {offset})")
        self.reason = reason
        self.offset = offset


class MalformedJson(ValueError):
    """Input is not one well-formed JSON record object."""


class MissingField(MalformedJson):
    """A required key is absent from a canonical JSON object."""

    def __init__(self, field: str):
        super().__init__(f"missing field: {field}")
        self.field = field


class BadTimestamp(MalformedJson):
    """The timestamp value cannot be parsed or lacks a UTC offset."""


@dataclass(frozen=True)
class CommandRecord:
    """One executed command plus its execution metadata."""

    timestamp: datetime          # aware, second precision or finer
    username: str
    hostname: str                # no whitespace
    ip: str                      # IPv4 dotted quad of the originating host
    wd: str                      # absolute path
    cmd: str                     # full command line as typed
    cmd_type: str                # one of CMD_TYPES
    sandbox_id: str              # [A-Za-z0-9_-]+

    def validate(self) -> "CommandRecord":
        """Check all field invariants; raise InvalidRecord on the first failure."""
        if not isinstance(self.timestamp, datetime) or self.timestamp.tzinfo is None:
            raise InvalidRecord("timestamp must be an aware datetime")
        if not self.username:
            raise InvalidRecord("username is empty")
        if not self.hostname or any(c.isspace() for c in self.hostname):
            raise InvalidRecord("hostname empty or contains whitespace")
        try:
            ipaddress.IPv4Address(self.ip)
        except ValueError:
            raise InvalidRecord(f"ip is not an IPv4 dotted quad: {self.ip!r}") from None
        if not self.wd.startswith("/"):
            raise InvalidRecord(f"wd is not an absolute path: {self.wd!r}")
        if not self.cmd:
            raise InvalidRecord("cmd is empty")
        if self.cmd_type not in CMD_TYPES:
            raise InvalidRecord(f"unknown cmd_type: {self.cmd_type!r}")
        if not _SANDBOX_ID_RE.match(self.sandbox_id):
            raise InvalidRecord(f"bad sandbox_id: {self.sandbox_id!r}")
        return self


def _escape(value: str) -> str:
    return value.replace("\\", "\\\\").replace('"', '\\"')


def _byte_offset(s: str, pos: int) -> int:
    return len(s[:pos].encode("utf-8"))


class _Scanner:
    """Cursor over one local line; every failure carries the byte offset."""

    def __init__(self, s: str):
        self.s = s
        self.pos = 0

    def fail(self, reason: str, at: int | None = None):
        raise MalformedLine(reason, _byte_offset(self.s, self.pos if at is None else at))

    def literal(self, lit: str, what: str):
        if not self.s.startswith(lit, self.pos):
            self.fail(f"expected {what}")
        self.pos += len(lit)

    def digits(self, lo: int, hi: int, what: str) -> int:
        start = self.pos
        while self.pos < len(self.s) and self.s[self.pos].isdigit() and self.pos - start < hi:
            self.pos += 1
        if self.pos - start < lo:
            self.fail(f"expected {what}", at=start)
        return int(self.s[start:self.pos])

    def quoted(self) -> str:
        # opening quote already consumed by literal()
        out = []
        while True:
            if self.pos >= len(self.s):
                self.fail("unterminated quoted value")
            c = self.s[self.pos]
            if c == '"':
                self.pos += 1
                return "".join(out)
            if c == "\\" and self.pos + 1 < len(self.s) and self.s[self.pos + 1] in ('"', "\\"):
                out.append(self.s[self.pos + 1])
                self.pos += 2
            else:
                out.append(c)
                self.pos += 1

    def keyed(self, key: str) -> str:
        self.literal(f'{key}="', f'{key}="')
        return self.quoted()

    def bare(self, what: str) -> str:
        start = self.pos
        while self.pos < len(self.s) and not self.s[self.pos].isspace():
            self.pos += 1
        if self.pos == start:
            self.fail(f"expected {what}")
        return self.s[start:self.pos]


def _scan_timestamp(sc: _Scanner, tz: timezone) -> datetime:
    start = sc.pos
    mon = sc.s[sc.pos:sc.pos + 3]
    if mon not in _MONTHS:
        sc.fail("expected month abbreviation", at=start)
    sc.pos += 3
    sc.literal(" ", "space after month")
    day = sc.digits(2, 2, "two-digit day")
    sc.literal(" ", "space after day")
    year = sc.digits(4, 4, "four-digit year")
    sc.literal(" ", "space after year")
    hour = sc.digits(1, 2, "hour")
    sc.literal(":", "':' after hour")
    minute = sc.digits(2, 2, "two-digit minute")
    sc.literal(":", "':' after minute")
    second = sc.digits(2, 2, "two-digit second")
    micro = 0
    if sc.pos < len(sc.s) and sc.s[sc.pos] == ".":
        sc.pos += 1
        fstart = sc.pos
        frac = str(sc.digits(1, 6, "fractional seconds"))
        micro = int(sc.s[fstart:sc.pos].ljust(6, "0"))
    try:
        return datetime(year, _MONTHS.index(mon) + 1, day, hour, minute, second,
                        micro, tzinfo=tz)
    except ValueError as e:
        raise MalformedLine(f"bad timestamp: {e}", _byte_offset(sc.s, start)) from None


def _scan_payload(sc: _Scanner) -> dict:
    fields = {}
    fields["username"] = sc.keyed("username")
    sc.literal(" ", "space after username")
    fields["hostname"] = sc.bare("hostname")
    for key in ("src", "wd", "cmd", "cmd_type", "sid"):
        sc.literal(" ", f"space before {key}")
        at = sc.pos
        fields[key] = sc.keyed(key)
        if key == "cmd_type" and fields[key] not in CMD_TYPES:
            sc.fail(f"unknown cmd_type: {fields[key]!r}", at=at)
    if sc.pos != len(sc.s) and sc.s[sc.pos:] != "\n":
        sc.fail("trailing data after sid")
    return fields


def _record_from_fields(ts: datetime, f: dict, sc: _Scanner) -> CommandRecord:
    rec = CommandRecord(
        timestamp=ts,
        username=f["username"],
        hostname=f["hostname"],
        ip=f["src"],
        wd=f["wd"],
        cmd=f["cmd"],
        cmd_type=f["cmd_type"],
        sandbox_id=f["sid"],
    )
    try:
        return rec.validate()
    except InvalidRecord as e:
        raise MalformedLine(str(e), _byte_offset(sc.s, len(sc.s))) from None


def parse_local_line(line: str, tz: timezone = DEFAULT_TZ) -> CommandRecord:
    """Parse one local log line into a CommandRecord.

    The line's timestamp carries no UTC offset; ``tz`` (the deployment-wide
    collector offset) is attached. Raises MalformedLine with the byte offset
    of the first violation.
    """
    sc = _Scanner(line)
    ts = _scan_timestamp(sc, tz)
    sc.literal(" ", "space after timestamp")
    fields = _scan_payload(sc)
    return _record_from_fields(ts, fields, sc)


def parse_payload(payload: str, timestamp: datetime) -> CommandRecord:
    """Parse the keyed part of a local line (no leading timestamp).

    Used for transport messages that carry the timestamp in their envelope.
    """
    sc = _Scanner(payload)
    fields = _scan_payload(sc)
    return _record_from_fields(timestamp, fields, sc)


def format_local_timestamp(ts: datetime) -> str:
    """Render a datetime in the local-line style: ``Jul 03 2020 8:09:25[.ffffff]``."""
    frac = f".{ts.microsecond:06d}" if ts.microsecond else ""
    return (f"{_MONTHS[ts.month - 1]} {ts.day:02d} {ts.year:04d} "
            f"{ts.hour}:{ts.minute:02d}:{ts.second:02d}{frac}")


def render_payload(record: CommandRecord) -> str:
    """Render the keyed part of the local line (everything after the timestamp)."""
    return LOCAL_LINE_TEMPLATE.format(
        username=_escape(record.username),
        hostname=record.hostname,
        ip=_escape(record.ip),
        wd=_escape(record.wd),
        cmd=_escape(record.cmd),
        cmd_type=record.cmd_type,
        sandbox_id=_escape(record.sandbox_id),
    )


def render_local_line(record: CommandRecord) -> str:
    """Render a record as the local line; inverse of parse_local_line.

    The UTC offset is not representable in this format, so
    ``parse_local_line(render_local_line(r), tz)`` restores ``r`` exactly when
    ``tz`` matches the record's offset.
    """
    record.validate()
    return f"{format_local_timestamp(record.timestamp)} {render_payload(record)}"


def to_canonical_json(record: CommandRecord) -> str:
    """Serialize to the canonical one-line JSON object with fixed key order.

    Deterministic: equal records produce byte-identical output. Fractional
    seconds are omitted when zero, otherwise rendered with six digits.
    """
    record.validate()
    return json.dumps(
        {
            "timestamp": record.timestamp.isoformat(),
            "username": record.username,
            "hostname": record.hostname,
            "ip": record.ip,
            "wd": record.wd,
            "cmd": record.cmd,
            "cmd_type": record.cmd_type,
            "sandbox_id": record.sandbox_id,
        },
        ensure_ascii=False,
    )


def _parse_iso_timestamp(raw: str) -> datetime:
    if raw.endswith("Z") or raw.endswith("z"):
        raw = raw[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(raw)
    except ValueError as e:
        raise BadTimestamp(f"bad timestamp: {e}") from None
    if ts.tzinfo is None:
        raise BadTimestamp(f"timestamp lacks a UTC offset: {raw!r}")
    return ts


def parse_canonical_json(text: str) -> CommandRecord:
    """Parse one canonical JSON object; tolerant of key order and whitespace."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedJson(f"not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise MalformedJson("expected a JSON object")
    for key in _JSON_KEYS:
        if key not in obj:
            raise MissingField(key)
        if not isinstance(obj[key], str):
            raise MalformedJson(f"field {key} must be a string")
    rec = CommandRecord(
        timestamp=_parse_iso_timestamp(obj["timestamp"]),
        username=obj["username"],
        hostname=obj["hostname"],
        ip=obj["ip"],
        wd=obj["wd"],
        cmd=obj["cmd"],
        cmd_type=obj["cmd_type"],
        sandbox_id=obj["sandbox_id"],
    )
    return rec.validate()


def with_timestamp(record: CommandRecord, ts: datetime) -> CommandRecord:
    """Copy of ``record`` carrying ``ts``."""
    return replace(record, timestamp=ts)
