"""Record model: grammar, round-trips, structured errors, fuzz totality."""

import json
import random
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmdtrace.records import (
    BadTimestamp,
    CommandRecord,
    InvalidRecord,
    MalformedJson,
    MalformedLine,
    MissingField,
    parse_canonical_json,
    parse_local_line,
    parse_payload,
    render_local_line,
    render_payload,
    to_canonical_json,
)

from helpers import (
    SAMPLE_CANONICAL_JSON,
    SAMPLE_LOCAL_LINE,
    SAMPLE_RECORD,
    make_record,
    random_record,
)

PLUS_ONE = timezone(timedelta(hours=1))


def test_parse_sample_line():
    rec = parse_local_line(SAMPLE_LOCAL_LINE, tz=PLUS_ONE)
    assert rec == SAMPLE_RECORD
    assert rec.timestamp.isoformat() == "2020-07-03T08:09:25+01:00"
    assert rec.ip == "10.1.135.83"
    assert rec.sandbox_id == "1"


def test_parse_unescapes_quotes():
    line = ('Jul 03 2020 8:09:25 username="root" attacker src="10.1.135.83" '
            'wd="/" cmd="echo \\"hi\\"" cmd_type="bash-command" sid="7"')
    rec = parse_local_line(line)
    assert rec.cmd == 'echo "hi"'
    assert rec.wd == "/"
    assert rec.sandbox_id == "7"


def test_parse_missing_field_is_malformed():
    line = ('Jul 03 2020 8:09:25 username="root" attacker src="10.1.135.83" '
            'wd="/home" cmd="ls"')
    with pytest.raises(MalformedLine) as ei:
        parse_local_line(line)
    assert "cmd_type" in str(ei.value)
    assert ei.value.offset > 0


@pytest.mark.parametrize("line,fragment", [
    ("", "month"),
    ("Xyz 03 2020 8:09:25 rest", "month"),
    ("Jul 3 2020 8:09:25 rest", "day"),
    ('Jul 03 2020 8:09:25 username="root', "unterminated"),
    ('Jul 03 2020 8:09:25 username="root" attacker src="1.2.3.4" wd="/h" '
     'cmd="ls" cmd_type="zsh-command" sid="1"', "cmd_type"),
    ('Jul 32 2020 8:09:25 username="root" attacker src="1.2.3.4" wd="/h" '
     'cmd="ls" cmd_type="bash-command" sid="1"', "timestamp"),
    ('Jul 03 2020 8:09:25 username="root" attacker src="1.2.3.4" wd="/h" '
     'cmd="ls" cmd_type="bash-command" sid="1" extra', "trailing"),
], ids=["empty", "bad-month", "one-digit-day", "unbalanced-quote",
        "unknown-cmd-type", "day-out-of-range", "trailing-data"])
def test_parse_errors_are_structured(line, fragment):
    with pytest.raises(MalformedLine) as ei:
        parse_local_line(line)
    assert fragment in str(ei.value).lower()
    assert isinstance(ei.value.offset, int)


def test_error_offset_points_at_violation():
    line = 'Jul 03 2020 8:09:25 username="root" attacker nonsense'
    with pytest.raises(MalformedLine) as ei:
        parse_local_line(line)
    assert ei.value.offset == line.index("nonsense")


def test_render_sample_record_verbatim():
    assert render_local_line(SAMPLE_RECORD) == SAMPLE_LOCAL_LINE


def test_render_escapes_quotes_and_backslashes():
    rec = make_record(cmd='grep "a\\b" f')
    line = render_local_line(rec)
    assert 'cmd="grep \\"a\\\\b\\" f"' in line
    assert parse_local_line(line, tz=PLUS_ONE) == rec


def test_hour_has_no_leading_zero_but_two_digit_hours_work():
    rec = make_record(timestamp=datetime(2020, 7, 3, 14, 9, 25, tzinfo=PLUS_ONE))
    line = render_local_line(rec)
    assert " 14:09:25 " in line
    assert parse_local_line(line, tz=PLUS_ONE) == rec


def test_local_line_round_trip_randomized():
    rng = random.Random(0xC0FFEE)
    for _ in range(1000):
        rec = random_record(rng)
        back = parse_local_line(render_local_line(rec), tz=rec.timestamp.tzinfo)
        assert back == rec, rec


def test_to_canonical_json_sample_exact():
    assert to_canonical_json(SAMPLE_RECORD) == SAMPLE_CANONICAL_JSON


def test_canonical_json_key_order():
    keys = list(json.loads(to_canonical_json(SAMPLE_RECORD)).keys())
    assert keys == ["timestamp", "username", "hostname", "ip", "wd",
                    "cmd", "cmd_type", "sandbox_id"]


def test_canonical_json_microseconds():
    rec = make_record(timestamp=datetime(2020, 7, 3, 8, 9, 25, 1, tzinfo=PLUS_ONE))
    assert '"2020-07-03T08:09:25.000001+01:00"' in to_canonical_json(rec)


def test_canonical_json_deterministic():
    a = to_canonical_json(SAMPLE_RECORD)
    b = to_canonical_json(parse_canonical_json(a))
    assert a == b


def test_canonical_round_trip_randomized():
    rng = random.Random(0xBEEF)
    for _ in range(1000):
        rec = random_record(rng)
        assert parse_canonical_json(to_canonical_json(rec)) == rec


def test_parse_canonical_json_sample():
    assert parse_canonical_json(SAMPLE_CANONICAL_JSON) == SAMPLE_RECORD


def test_parse_canonical_json_tolerates_key_order_and_whitespace():
    obj = json.loads(SAMPLE_CANONICAL_JSON)
    reordered = json.dumps({k: obj[k] for k in reversed(list(obj))}, indent=2)
    assert parse_canonical_json(reordered) == SAMPLE_RECORD


def test_parse_canonical_json_missing_field():
    obj = json.loads(SAMPLE_CANONICAL_JSON)
    del obj["ip"]
    with pytest.raises(MissingField) as ei:
        parse_canonical_json(json.dumps(obj))
    assert ei.value.field == "ip"


def test_parse_canonical_json_bad_timestamp():
    obj = json.loads(SAMPLE_CANONICAL_JSON)
    obj["timestamp"] = "not-a-time"
    with pytest.raises(BadTimestamp):
        parse_canonical_json(json.dumps(obj))
    obj["timestamp"] = "2020-07-03T08:09:25"  # offset required
    with pytest.raises(BadTimestamp):
        parse_canonical_json(json.dumps(obj))


def test_parse_canonical_json_accepts_zulu():
    obj = json.loads(SAMPLE_CANONICAL_JSON)
    obj["timestamp"] = "2020-07-03T07:09:25Z"
    rec = parse_canonical_json(json.dumps(obj))
    assert rec.timestamp == SAMPLE_RECORD.timestamp


def test_parse_canonical_json_rejects_garbage():
    with pytest.raises(MalformedJson):
        parse_canonical_json("{nope")
    with pytest.raises(MalformedJson):
        parse_canonical_json("[1, 2]")


def test_payload_helpers_round_trip():
    payload = render_payload(SAMPLE_RECORD)
    assert payload.startswith('username="root" attacker src=')
    rec = parse_payload(payload, SAMPLE_RECORD.timestamp)
    assert rec == SAMPLE_RECORD


@pytest.mark.parametrize("field,value", [
    ("username", ""),
    ("hostname", "two words"),
    ("ip", "10.1.135"),
    ("ip", "example.com"),
    ("wd", "relative/path"),
    ("cmd", ""),
    ("cmd_type", "powershell-command"),
    ("sandbox_id", "has space"),
    ("sandbox_id", ""),
])
def test_invalid_records_rejected(field, value):
    rec = make_record(**{field: value})
    with pytest.raises(InvalidRecord):
        rec.validate()
    with pytest.raises((InvalidRecord, ValueError)):
        to_canonical_json(rec)


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=120))
def test_parse_totality_on_arbitrary_text(line):
    # Every input either parses or raises exactly MalformedLine; never crashes.
    try:
        rec = parse_local_line(line)
        assert isinstance(rec, CommandRecord)
    except MalformedLine as e:
        assert isinstance(e.offset, int)
        assert 0 <= e.offset <= len(line.encode("utf-8"))


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=120))
def test_parse_totality_on_arbitrary_bytes(data):
    line = data.decode("utf-8", errors="replace")
    try:
        parse_local_line(line)
    except MalformedLine:
        pass
