"""Syslog wire format: RFC 5424 envelopes, octet-counted TCP framing, frame MACs.

A frame looks like::

    <134>1 2020-07-03T08:09:25+01:00 attacker cmdlog - - - username="root" ...

The MSG part carries the local log line (or just its keyed payload when the
timestamp travels only in the envelope). Over TCP, frames are octet-counted
(``LEN SP FRAME``) so command text may contain any bytes, newlines included.
When a shared key is configured, each frame's payload ends with a
``mac="<hex>"`` key holding an HMAC-SHA256 over the rest of the message; the
receiver verifies and strips it.
"""

from __future__ import annotations

import hmac
import re
from dataclasses import dataclass
from datetime import datetime
from hashlib import sha256

__all__ = [
    "DEFAULT_PRI",
    "FrameStreamReader",
    "MalformedFrame",
    "SyslogFrame",
    "encode_octet_counted",
    "parse_frame",
    "render_frame",
    "sign_message",
    "split_mac",
    "verify_and_strip_mac",
]

#: local0.info, the traditional choice for custom application logs.
DEFAULT_PRI = 134

APP_NAME = "cmdlog"

_HEADER_RE = re.compile(
    r"<(?P<pri>\d{1,3})>(?P<version>\d) "
    r"(?P<timestamp>\S+) (?P<hostname>\S+) (?P<app>\S+) "
    r"(?P<procid>\S+) (?P<msgid>\S+) "
)

_MAC_RE = re.compile(r' mac="(?P<mac>[0-9a-f]{64})"\Z')


class MalformedFrame(ValueError):
    """Bytes do not form a well-formed RFC 5424 frame."""


@dataclass(frozen=True)
class SyslogFrame:
    pri: int
    version: int
    timestamp: datetime | None    # None when the header carries the nil value
    hostname: str | None
    app_name: str
    msg: str

    @property
    def facility(self) -> int:
        return self.pri >> 3

    @property
    def severity(self) -> int:
        return self.pri & 0x7


def parse_frame(data: bytes) -> SyslogFrame:
    """Parse one complete frame (a UDP datagram or one octet-counted message)."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise MalformedFrame(f"not UTF-8: {e}") from None
    m = _HEADER_RE.match(text)
    if not m:
        raise MalformedFrame("bad header")
    pri = int(m.group("pri"))
    if pri > 191:
        raise MalformedFrame(f"PRI out of range: {pri}")
    if m.group("version") != "1":
        raise MalformedFrame(f"unsupported version: {m.group('version')}")
    rest = text[m.end():]
    # Structured data: either the nil value or bracketed elements we skip over.
    if rest.startswith("-"):
        rest = rest[1:]
    elif rest.startswith("["):
        depth_end = _skip_structured_data(rest)
        rest = rest[depth_end:]
    else:
        raise MalformedFrame("bad structured-data field")
    if rest.startswith(" "):
        msg = rest[1:]
    elif rest == "":
        msg = ""
    else:
        raise MalformedFrame("junk after structured-data")
    if msg.startswith("﻿"):
        msg = msg[1:]
    if not msg:
        raise MalformedFrame("empty message")

    raw_ts = m.group("timestamp")
    if raw_ts == "-":
        ts = None
    else:
        if raw_ts.endswith(("Z", "z")):
            raw_ts = raw_ts[:-1] + "+00:00"
        try:
            ts = datetime.fromisoformat(raw_ts)
        except ValueError as e:
            raise MalformedFrame(f"bad header timestamp: {e}") from None
        if ts.tzinfo is None:
            raise MalformedFrame("header timestamp lacks an offset")
    hostname = None if m.group("hostname") == "-" else m.group("hostname")
    return SyslogFrame(
        pri=pri, version=1, timestamp=ts, hostname=hostname,
        app_name=m.group("app"), msg=msg,
    )


def _skip_structured_data(s: str) -> int:
    # s starts with '['; return index one past the final closing bracket.
    i = 0
    while i < len(s) and s[i] == "[":
        i += 1
        escaped = False
        while i < len(s):
            c = s[i]
            if escaped:
                escaped = False
            elif c == "\\":
                escaped = True
            elif c == "]":
                i += 1
                break
            i += 1
        else:
            raise MalformedFrame("unterminated structured data")
    return i


def render_frame(msg: str, *, timestamp: datetime, hostname: str,
                 pri: int = DEFAULT_PRI, app_name: str = APP_NAME,
                 hmac_key: bytes | None = None) -> bytes:
    """Render one frame; appends a MAC over ``msg`` when a key is given."""
    if not 0 <= pri <= 191:
        raise ValueError(f"PRI out of range: {pri}")
    if hmac_key is not None:
        msg = sign_message(msg, hmac_key)
    head = f"<{pri}>1 {timestamp.isoformat()} {hostname} {app_name} - - - "
    return (head + msg).encode("utf-8")


def sign_message(msg: str, key: bytes) -> str:
    mac = hmac.new(key, msg.encode("utf-8"), sha256).hexdigest()
    return f'{msg} mac="{mac}"'


def split_mac(msg: str) -> tuple[str, str | None]:
    """Return (message without trailing mac key, mac hex or None)."""
    m = _MAC_RE.search(msg)
    if not m:
        return msg, None
    return msg[:m.start()], m.group("mac")


def verify_and_strip_mac(msg: str, key: bytes) -> str:
    """Strip the trailing mac key after verifying it; raise MalformedFrame otherwise."""
    body, mac = split_mac(msg)
    if mac is None:
        raise MalformedFrame("missing mac")
    want = hmac.new(key, body.encode("utf-8"), sha256).hexdigest()
    if not hmac.compare_digest(mac, want):
        raise MalformedFrame("bad mac")
    return body


def encode_octet_counted(frame: bytes) -> bytes:
    return b"%d %s" % (len(frame), frame)


class FrameStreamReader:
    """Incremental decoder for an octet-counted TCP byte stream."""

    MAX_FRAME = 1 << 20

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[bytes]:
        """Absorb bytes; return the complete frames they finish."""
        self._buf.extend(data)
        frames = []
        while True:
            sp = self._buf.find(b" ")
            if sp < 0:
                if len(self._buf) > 20:
                    raise MalformedFrame("missing octet count")
                break
            head = bytes(self._buf[:sp])
            if not head.isdigit():
                raise MalformedFrame(f"bad octet count: {head!r}")
            n = int(head)
            if n > self.MAX_FRAME:
                raise MalformedFrame(f"frame too large: {n}")
            if len(self._buf) < sp + 1 + n:
                break
            frames.append(bytes(self._buf[sp + 1:sp + 1 + n]))
            del self._buf[:sp + 1 + n]
        return frames
