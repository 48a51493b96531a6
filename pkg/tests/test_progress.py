"""Progress mapping: scenario validation, the documented demo session, timeline."""

import json
import random
from datetime import datetime, timedelta, timezone
from importlib import resources

import pytest

from cmdtrace.agent import load_trace
from cmdtrace.analytics import normalize
from cmdtrace.progress import (
    CyclicPrerequisites,
    MalformedScenario,
    Matcher,
    bundled_scenario_path,
    load_scenario,
    map_session,
    match_command,
    timeline,
)

from helpers import make_record

TZ1 = timezone(timedelta(hours=1))
BASE = datetime(2020, 7, 3, 8, 10, 0, tzinfo=TZ1)

STEP_IDS = ["scan-service", "select-exploit", "launch-exploit",
            "crack-passphrase", "remote-login"]


@pytest.fixture(scope="module")
def scenario():
    return load_scenario(bundled_scenario_path())


@pytest.fixture(scope="module")
def demo_records():
    path = resources.files("cmdtrace").joinpath("data/sample_session.jsonl")
    return list(load_trace(str(path)))


def _session(cmds, start=BASE, step=10):
    return [make_record(cmd=c, timestamp=start + timedelta(seconds=step * i))
            for i, c in enumerate(cmds)]


# -- scenario loading ---------------------------------------------------------------


def test_bundled_scenario_shape(scenario):
    assert [s.step_id for s in scenario.steps] == STEP_IDS
    # Linear prerequisite chain.
    for prev, step in zip(scenario.steps, scenario.steps[1:]):
        assert step.prerequisites == (prev.step_id,)
    assert scenario.steps[0].prerequisites == ()
    ctx = scenario.context
    assert ctx.targets == frozenset({"172.18.1.5"})
    assert ctx.routers == frozenset({"172.18.1.1"})
    assert ctx.cidrs == ("172.18.0.0/16",)
    assert ctx.expected_module == "exploit/unix/webapp/webmin_backdoor"
    assert ctx.expected_lhost == "10.1.135.83"
    assert ctx.required_params == ("RHOSTS", "LHOST")
    assert scenario.start_tools == ("nmap",)


def _write_scenario(tmp_path, doc):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def test_self_dependency_rejected(tmp_path):
    doc = {"steps": [{"id": "a", "match": {"tool": "x"}, "requires": ["a"]}]}
    with pytest.raises(CyclicPrerequisites) as info:
        load_scenario(_write_scenario(tmp_path, doc))
    assert info.value.step_ids == ["a"]


def test_two_step_cycle_rejected(tmp_path):
    doc = {"steps": [
        {"id": "a", "match": {"tool": "x"}, "requires": ["b"]},
        {"id": "b", "match": {"tool": "y"}, "requires": ["a"]},
    ]}
    with pytest.raises(CyclicPrerequisites) as info:
        load_scenario(_write_scenario(tmp_path, doc))
    assert set(info.value.step_ids) == {"a", "b"}


@pytest.mark.parametrize("doc,fragment", [
    ({"steps": [{"id": "a", "match": {"tool": "x"}, "requires": ["ghost"]}]},
     "unknown prerequisite"),
    ({"steps": [{"id": "a", "match": {"tool": "x"}},
                {"id": "a", "match": {"tool": "y"}}]}, "duplicate"),
    ({"steps": [{"id": "a", "match": {}}]}, "needs a tool"),
    ({"steps": [{"id": "a", "match": {"tool": "x", "options": [["-p", "v", "x"]]}}]},
     "bad option pattern"),
    ({"steps": [{"id": "a", "match": {"tool": "x", "positionals": ["re:["]}}]},
     "bad regex"),
    ({"steps": [{"id": "a", "match": {"tool": "x", "options": [["-p", "re:("]]}}]},
     "bad regex"),
    ({"steps": [], "context": {"cidrs": ["not-a-network"]}}, "bad cidr"),
    ({"nope": True}, "steps"),
])
def test_malformed_scenarios_rejected(tmp_path, doc, fragment):
    with pytest.raises(MalformedScenario) as info:
        load_scenario(_write_scenario(tmp_path, doc))
    assert fragment in str(info.value)


def test_unreadable_or_invalid_json_rejected(tmp_path):
    with pytest.raises(MalformedScenario):
        load_scenario(str(tmp_path / "missing.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(MalformedScenario):
        load_scenario(str(bad))


def test_empty_steps_valid(tmp_path):
    spec = load_scenario(_write_scenario(tmp_path, {"steps": []}))
    assert spec.steps == ()
    graph = map_session(_session(["ls"]), spec)
    assert graph.statuses == {} and graph.errors == []


# -- matcher ------------------------------------------------------------------------


def _nc(cmd):
    return normalize(cmd)


def test_match_tool_literal_and_regex():
    assert match_command(_nc("nmap 10.0.0.1"), Matcher(tool="nmap"))
    assert not match_command(_nc("ls"), Matcher(tool="nmap"))
    pattern = Matcher(tool="re:^(exploit|run)$")
    assert match_command(_nc("exploit"), pattern)
    assert match_command(_nc("run"), pattern)
    assert not match_command(_nc("running"), pattern)


def test_match_option_presence_and_value():
    m = Matcher(tool="nmap", options=(("-sV", None), ("-p", "*")))
    assert match_command(_nc("nmap -sV -p 10000 172.18.1.5"), m)
    assert not match_command(_nc("nmap -sV 172.18.1.5"), m)          # -p missing
    assert not match_command(_nc("nmap -p 10000 172.18.1.5"), m)     # -sV missing
    assert not match_command(_nc("nmap -sV --p 10000 172.18.1.5"), m)  # wrong flag name
    literal = Matcher(tool="nmap", options=(("-p", "22"),))
    assert match_command(_nc("nmap -p 22 h"), literal)
    assert not match_command(_nc("nmap -p 23 h"), literal)


def test_match_positional_patterns():
    assert match_command(_nc("nmap 172.18.1.5"),
                         Matcher(tool="nmap", positionals=("172.18.1.5",)))
    assert match_command(_nc("nmap 172.18.99.7"),
                         Matcher(tool="nmap", positionals=("172.18.0.0/16",)))
    assert not match_command(_nc("nmap 10.0.0.1"),
                             Matcher(tool="nmap", positionals=("172.18.0.0/16",)))
    assert match_command(_nc("ssh -i key root@172.18.1.7"),
                         Matcher(tool="ssh", positionals=("re:(.+@)?172\\.18\\.1\\.7",)))
    assert match_command(_nc("x anything"), Matcher(tool="x", positionals=("*",)))
    assert not match_command(_nc("x"), Matcher(tool="x", positionals=("*",)))


def test_match_positionals_are_an_ordered_subsequence():
    m = Matcher(tool="t", positionals=("a", "c"))
    assert match_command(_nc("t a b c"), m)
    assert not match_command(_nc("t c b a"), m)


# -- demo session --------------------------------------------------------------------


def test_demo_session_is_the_documented_trace(demo_records):
    assert [r.cmd for r in demo_records] == [
        "nmap --help",
        "nmap 172.18.1.5",
        "pwd",
        "ls",
        "nmap --help",
        "nmap -sV --p 10000 172.18.1.5",
        "nmap -sV -p 10000 172.18.1.5",
    ]
    offsets = [(r.timestamp - BASE).total_seconds() for r in demo_records]
    assert offsets == [0, 55, 191, 194, 206, 250, 257]


def test_demo_session_achieves_scan_at_last_record(demo_records, scenario):
    graph = map_session(demo_records, scenario)
    scan = graph.statuses["scan-service"]
    assert scan.status == "achieved"
    assert scan.seq == 7
    assert scan.timestamp == BASE + timedelta(seconds=257)
    for sid in STEP_IDS[1:]:
        assert graph.statuses[sid].status == "pending"


def test_demo_session_near_misses(demo_records, scenario):
    graph = map_session(demo_records, scenario)
    misses = [e for e in graph.errors if e.kind == "near-miss"]
    assert [(e.seq, e.step_id) for e in misses] == [
        (2, "scan-service"), (6, "scan-service")]
    assert misses[1].evidence == "nmap --p=10000 -sV 172.18.1.5"
    # Help invocations and off-tool commands produce no error events.
    assert all(e.kind in ("near-miss",) for e in graph.errors)


def test_empty_session_all_pending(scenario):
    graph = map_session([], scenario)
    assert {st.status for st in graph.statuses.values()} == {"pending"}
    assert graph.errors == []


def test_final_step_only_marks_ancestors_omitted(scenario):
    graph = map_session(_session(["ssh root@172.18.1.7"]), scenario)
    assert graph.statuses["remote-login"].status == "achieved"
    for sid in STEP_IDS[:-1]:
        assert graph.statuses[sid].status == "omitted"
    violations = [e for e in graph.errors if e.kind == "order-violation"]
    assert sorted(e.step_id for e in violations) == sorted(STEP_IDS[:-1])


def test_mid_step_only_leaves_descendants_pending(scenario):
    graph = map_session(
        _session(["john --wordlist=/usr/share/wordlists/rockyou.txt key.hash"]),
        scenario)
    assert graph.statuses["crack-passphrase"].status == "achieved"
    assert graph.statuses["remote-login"].status == "pending"
    for sid in STEP_IDS[:3]:
        assert graph.statuses[sid].status == "omitted"


def test_near_miss_suppressed_when_another_step_matches(tmp_path):
    doc = {"steps": [
        {"id": "a", "match": {"tool": "nmap", "options": [["-sV"]]}},
        {"id": "b", "match": {"tool": "nmap", "options": [["-sn"]]}},
    ]}
    spec = load_scenario(_write_scenario(tmp_path, doc))
    graph = map_session(_session(["nmap -sV h"]), spec)
    assert [e.kind for e in graph.errors] == []          # matched a: no near-miss for b
    graph = map_session(_session(["nmap -A h"]), spec)
    assert [(e.kind, e.step_id) for e in graph.errors] == [("near-miss", "a")]


def test_detector_findings_become_error_events(scenario):
    graph = map_session(_session(["nmap 172.18.1.1"]), scenario)
    finding_events = [e for e in graph.errors if e.kind == "finding"]
    assert [e.rule_id for e in finding_events] == ["NMAP_ROUTER_TARGET"]
    assert finding_events[0].step_id == "scan-service"   # linked by tool


def test_first_matching_record_wins(scenario):
    records = _session(["nmap -sV -p 10000 172.18.1.5",
                        "nmap -sV -p 10000 172.18.1.5"])
    graph = map_session(records, scenario)
    assert graph.statuses["scan-service"].seq == 1


def test_edges_mirror_prerequisites(scenario):
    graph = map_session([], scenario)
    assert graph.edges == [(a, b) for a, b in zip(STEP_IDS, STEP_IDS[1:])]


# -- properties ----------------------------------------------------------------------

POOL = [
    "nmap -sV -p 10000 172.18.1.5",
    "nmap 172.18.1.5",
    "nmap --help",
    "nmap 172.18.1.1",
    "use exploit/unix/webapp/webmin_backdoor",
    "search webmin",
    "exploit",
    "john --wordlist=/usr/share/wordlists/rockyou.txt key.hash",
    "john key.hash",
    "ssh root@172.18.1.7",
    "ls", "pwd", "cat notes.txt",
]


def _random_session(rng, n):
    return _session([rng.choice(POOL) for _ in range(n)])


def test_extension_never_unachieves(scenario):
    rng = random.Random(11)
    for _ in range(100):
        records = _random_session(rng, rng.randrange(0, 12))
        before = map_session(records, scenario)
        extension = _session([rng.choice(POOL) for _ in range(rng.randrange(1, 6))],
                             start=BASE + timedelta(seconds=10 * len(records)))
        after = map_session(records + extension, scenario)
        for sid in before.achieved():
            assert after.statuses[sid] == before.statuses[sid]
        assert before.achieved() <= after.achieved()


def test_prerequisite_consistency_on_random_sessions(scenario):
    rng = random.Random(13)
    by_id = {s.step_id: s for s in scenario.steps}
    for _ in range(100):
        graph = map_session(_random_session(rng, rng.randrange(0, 15)), scenario)
        violated = {e.step_id for e in graph.errors if e.kind == "order-violation"}
        for sid in graph.achieved():
            for pre in by_id[sid].prerequisites:
                if graph.statuses[pre].status != "achieved":
                    assert graph.statuses[pre].status == "omitted"
                    assert pre in violated


def test_mapping_is_deterministic(demo_records, scenario):
    a = map_session(demo_records, scenario)
    b = map_session(demo_records, scenario)
    assert a == b
    assert timeline(demo_records, [], a) == timeline(demo_records, [], b)


# -- timeline ------------------------------------------------------------------------


def test_demo_timeline_shape(demo_records, scenario):
    graph = map_session(demo_records, scenario)
    events = timeline(demo_records, [], graph)
    commands = [e for e in events if e.kind == "command"]
    steps = [e for e in events if e.kind == "step-achieved"]
    findings = [e for e in events if e.kind == "finding"]
    assert len(commands) == 7
    assert [s.payload["step_id"] for s in steps] == ["scan-service"]
    assert steps[0].timestamp == BASE + timedelta(seconds=257)
    assert findings == []
    # At the shared timestamp the command comes before its achievement.
    tail = [e.kind for e in events if e.timestamp == BASE + timedelta(seconds=257)]
    assert tail == ["command", "step-achieved"]


def test_demo_timeline_correctness_flags(demo_records, scenario):
    graph = map_session(demo_records, scenario)
    events = timeline(demo_records, [], graph)
    flags = {e.payload["seq"]: e.correct for e in events if e.kind == "command"}
    assert flags == {1: None, 2: None, 3: None, 4: None, 5: None, 6: None, 7: True}


def test_timeline_finding_outranks_achievement(scenario):
    # One command both satisfies the scan matcher and trips the ping-only rule.
    records = _session(["nmap -sV -p 10000 -sn 172.18.1.5"])
    from cmdtrace.detectors import evaluate_session
    findings, _ = evaluate_session(records, scenario.context)
    assert [f.rule_id for f in findings] == ["NMAP_PING_ONLY"]
    graph = map_session(records, scenario, findings=findings)
    events = timeline(records, findings, graph)
    command = next(e for e in events if e.kind == "command")
    assert command.correct is False
    kinds = [e.kind for e in events]
    assert kinds == ["command", "step-achieved", "finding"]


def test_timeline_counts_match_records(scenario):
    rng = random.Random(19)
    for _ in range(100):
        records = _random_session(rng, rng.randrange(0, 15))
        from cmdtrace.detectors import evaluate_session
        findings, _ = evaluate_session(records, scenario.context)
        graph = map_session(records, scenario, findings=findings)
        events = timeline(records, findings, graph)
        assert sum(1 for e in events if e.kind == "command") == len(records)
        assert all(e.correct in (True, False, None) for e in events)
        assert events == sorted(events, key=lambda e: e.timestamp)
