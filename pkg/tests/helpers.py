"""Shared fixtures-by-hand: reference values and randomized generators."""

from __future__ import annotations

import random
import socket
import string
import time
from datetime import datetime, timedelta, timezone

from cmdtrace.records import CommandRecord

# The documented single-command example: local line and its canonical JSON.
SAMPLE_LOCAL_LINE = (
    'Jul 03 2020 8:09:25 username="root" attacker src="10.1.135.83" '
    'wd="/home" cmd="nmap --help" cmd_type="bash-command" sid="1"'
)

SAMPLE_CANONICAL_JSON = (
    '{"timestamp": "2020-07-03T08:09:25+01:00", "username": "root", '
    '"hostname": "attacker", "ip": "10.1.135.83", "wd": "/home", '
    '"cmd": "nmap --help", "cmd_type": "bash-command", "sandbox_id": "1"}'
)

SAMPLE_RECORD = CommandRecord(
    timestamp=datetime(2020, 7, 3, 8, 9, 25, tzinfo=timezone(timedelta(hours=1))),
    username="root",
    hostname="attacker",
    ip="10.1.135.83",
    wd="/home",
    cmd="nmap --help",
    cmd_type="bash-command",
    sandbox_id="1",
)


def make_record(**overrides) -> CommandRecord:
    base = dict(
        timestamp=SAMPLE_RECORD.timestamp,
        username="root",
        hostname="attacker",
        ip="10.1.135.83",
        wd="/home",
        cmd="ls",
        cmd_type="bash-command",
        sandbox_id="1",
    )
    base.update(overrides)
    return CommandRecord(**base)


_WORD_CHARS = string.ascii_letters + string.digits
_CMD_CHARS = string.ascii_letters + string.digits + ' -_./"\\\'$&|;=:'


def random_record(rng: random.Random) -> CommandRecord:
    """One random but valid record; exercises quoting, offsets, and precision."""
    offset_min = rng.choice([-720, -330, -60, 0, 60, 120, 345, 720])
    micro = rng.choice([0, 0, rng.randrange(1, 1_000_000)])
    ts = datetime(
        rng.randrange(2019, 2026), rng.randrange(1, 13), rng.randrange(1, 29),
        rng.randrange(0, 24), rng.randrange(0, 60), rng.randrange(0, 60),
        micro, tzinfo=timezone(timedelta(minutes=offset_min)),
    )
    return CommandRecord(
        timestamp=ts,
        username="".join(rng.choices(_WORD_CHARS, k=rng.randrange(1, 12))),
        hostname="".join(rng.choices(_WORD_CHARS + "-.", k=rng.randrange(1, 16))),
        ip=".".join(str(rng.randrange(0, 256)) for _ in range(4)),
        wd="/" + "/".join(
            "".join(rng.choices(_WORD_CHARS, k=rng.randrange(1, 8)))
            for _ in range(rng.randrange(0, 4))
        ).rstrip("/"),
        cmd="".join(rng.choices(_CMD_CHARS, k=rng.randrange(1, 60))),
        cmd_type=rng.choice(["bash-command", "msf-command"]),
        sandbox_id="".join(rng.choices(_WORD_CHARS + "_-", k=rng.randrange(1, 8))),
    )


def random_trace(rng: random.Random, n: int, sandbox_id: str = "1",
                 start: datetime | None = None) -> list[CommandRecord]:
    """n records for one sandbox with non-decreasing whole-second timestamps."""
    ts = start or datetime(2020, 7, 3, 8, 0, 0, tzinfo=timezone(timedelta(hours=1)))
    out = []
    for i in range(n):
        rec = random_record(rng)
        out.append(CommandRecord(
            timestamp=ts, username=rec.username, hostname="attacker",
            ip=rec.ip, wd=rec.wd, cmd=f"{rec.cmd} #{i}",
            cmd_type=rec.cmd_type, sandbox_id=sandbox_id,
        ))
        ts = ts + timedelta(seconds=rng.randrange(0, 90))
    return out


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def wait_until(pred, timeout: float = 10.0, interval: float = 0.02) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if pred():
            return True
        time.sleep(interval)
    return pred()
