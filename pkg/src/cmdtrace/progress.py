"""Mapping sessions onto a declarative reference solution.

A scenario file lists the steps of the exercise, each with a matcher (tool
plus required options/positionals) and prerequisite steps. Mapping a session
walks the commands in time order and marks each step achieved at the first
command satisfying its matcher; steps skipped over are omitted, the rest stay
pending. Near-misses (right tool, wrong invocation) and detector findings
are attached as error events. A merged per-session timeline feeds the
dashboard's chronological view.
"""

from __future__ import annotations

import ipaddress
import json
import re
from dataclasses import dataclass, field
from datetime import datetime
from importlib import resources

from cmdtrace.analytics import NormalizedCommand, normalize
from cmdtrace.detectors import DetectorContext, Finding, evaluate_session
from cmdtrace.records import CommandRecord

__all__ = [
    "CyclicPrerequisites",
    "ErrorEvent",
    "MalformedScenario",
    "Matcher",
    "ProgressGraph",
    "ScenarioSpec",
    "Step",
    "StepStatus",
    "TimelineEvent",
    "bundled_scenario_path",
    "load_scenario",
    "map_session",
    "match_command",
    "timeline",
]


class MalformedScenario(ValueError):
    pass


class CyclicPrerequisites(ValueError):
    def __init__(self, step_ids: list[str]):
        super().__init__("prerequisite cycle through: " + ", ".join(step_ids))
        self.step_ids = step_ids


@dataclass(frozen=True)
class Matcher:
    """tool + required option patterns + required positional patterns.

    Patterns are literals, ``*`` (any value), a CIDR (for positionals that
    are addresses), or ``re:<regex>`` for anything else.
    """

    tool: str
    options: tuple[tuple[str, str | None], ...] = ()   # (flag, value pattern?)
    positionals: tuple[str, ...] = ()


def _pattern_matches(pattern: str, value: str) -> bool:
    if pattern == "*":
        return True
    if pattern.startswith("re:"):
        return re.fullmatch(pattern[3:], value) is not None
    if "/" in pattern:
        try:
            net = ipaddress.ip_network(pattern)
            return ipaddress.ip_address(value) in net
        except ValueError:
            pass                                   # not address-shaped: literal
    return pattern == value


def _tool_matches(pattern: str, tool: str) -> bool:
    if pattern.startswith("re:"):
        return re.fullmatch(pattern[3:], tool) is not None
    return pattern == tool


def match_command(nc: NormalizedCommand, matcher: Matcher) -> bool:
    """True when the command satisfies every requirement of the matcher."""
    if not _tool_matches(matcher.tool, nc.tool):
        return False
    for flag, want in matcher.options:
        hits = [v for f, v in nc.options if f == flag]
        if not hits:
            return False
        if want is not None and not any(
                v is not None and _pattern_matches(want, v) for v in hits):
            return False
    # Positional patterns must be satisfied in order (subsequence match).
    pos = 0
    for want in matcher.positionals:
        while pos < len(nc.positionals) and not _pattern_matches(want, nc.positionals[pos]):
            pos += 1
        if pos >= len(nc.positionals):
            return False
        pos += 1
    return True


@dataclass(frozen=True)
class Step:
    step_id: str
    title: str
    matcher: Matcher
    prerequisites: tuple[str, ...] = ()


@dataclass(frozen=True)
class ScenarioSpec:
    steps: tuple[Step, ...]
    context: DetectorContext
    start_tools: tuple[str, ...] = ("nmap",)

    def step(self, step_id: str) -> Step:
        for s in self.steps:
            if s.step_id == step_id:
                return s
        raise KeyError(step_id)


def bundled_scenario_path() -> str:
    return str(resources.files("cmdtrace").joinpath("data/default_scenario.json"))


def _parse_matcher(raw: dict, step_id: str) -> Matcher:
    if "tool" not in raw:
        raise MalformedScenario(f"step {step_id}: matcher needs a tool")
    options = []
    for entry in raw.get("options", []):
        if isinstance(entry, str):
            entry = [entry]
        if not isinstance(entry, list) or not 1 <= len(entry) <= 2:
            raise MalformedScenario(f"step {step_id}: bad option pattern {entry!r}")
        options.append((entry[0], entry[1] if len(entry) == 2 else None))
    positionals = tuple(raw.get("positionals", []))
    for pattern in [p for _, p in options if p is not None] + list(positionals):
        if pattern.startswith("re:"):
            try:
                re.compile(pattern[3:])
            except re.error as e:
                raise MalformedScenario(
                    f"step {step_id}: bad regex {pattern!r}: {e}") from None
    return Matcher(tool=raw["tool"], options=tuple(options), positionals=positionals)


def _check_acyclic(steps: tuple[Step, ...]):
    color: dict[str, int] = {}
    stack: list[str] = []
    by_id = {s.step_id: s for s in steps}

    def visit(sid: str):
        color[sid] = 1
        stack.append(sid)
        for pre in by_id[sid].prerequisites:
            if color.get(pre, 0) == 1:
                raise CyclicPrerequisites(stack[stack.index(pre):])
            if color.get(pre, 0) == 0:
                visit(pre)
        stack.pop()
        color[sid] = 2

    for s in steps:
        if color.get(s.step_id, 0) == 0:
            visit(s.step_id)


def load_scenario(path: str) -> ScenarioSpec:
    """Parse and validate a scenario file; rejects cycles and unknown refs."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedScenario(f"{path}: {e}") from None
    if not isinstance(doc, dict) or "steps" not in doc:
        raise MalformedScenario("scenario needs a top-level steps list")
    steps = []
    for raw in doc["steps"]:
        try:
            step_id = raw["id"]
            matcher = _parse_matcher(raw["match"], step_id)
        except (KeyError, TypeError) as e:
            raise MalformedScenario(f"bad step entry: {e}") from None
        steps.append(Step(
            step_id=step_id,
            title=raw.get("title", step_id),
            matcher=matcher,
            prerequisites=tuple(raw.get("requires", [])),
        ))
    ids = [s.step_id for s in steps]
    if len(set(ids)) != len(ids):
        raise MalformedScenario("duplicate step ids")
    known = set(ids)
    for s in steps:
        for pre in s.prerequisites:
            if pre not in known:
                raise MalformedScenario(
                    f"step {s.step_id}: unknown prerequisite {pre!r}")
    steps = tuple(steps)
    _check_acyclic(steps)
    raw_ctx = doc.get("context", {})
    for cidr in raw_ctx.get("cidrs", []):
        try:
            ipaddress.ip_network(cidr)
        except ValueError as e:
            raise MalformedScenario(f"bad cidr {cidr!r}: {e}") from None
    ctx = DetectorContext(
        targets=frozenset(raw_ctx.get("targets", [])),
        routers=frozenset(raw_ctx.get("router_addresses", [])),
        cidrs=tuple(raw_ctx.get("cidrs", [])),
        expected_module=raw_ctx.get("expected_module"),
        expected_lhost=raw_ctx.get("expected_lhost"),
        required_params=tuple(raw_ctx.get("required_params", [])),
        wordlist_dirs=frozenset(raw_ctx.get("wordlist_dirs", [])),
    )
    return ScenarioSpec(
        steps=steps,
        context=ctx,
        start_tools=tuple(raw_ctx.get("start_tools", ["nmap"])),
    )


# -- mapping ------------------------------------------------------------------


@dataclass(frozen=True)
class StepStatus:
    status: str                      # achieved | omitted | pending
    timestamp: datetime | None = None
    seq: int | None = None           # store sequence of the achieving record


@dataclass(frozen=True)
class ErrorEvent:
    kind: str                        # near-miss | order-violation | finding
    timestamp: datetime
    seq: int | None
    step_id: str | None
    rule_id: str | None
    evidence: str


@dataclass
class ProgressGraph:
    statuses: dict[str, StepStatus]
    errors: list[ErrorEvent]
    edges: list[tuple[str, str]]     # (prerequisite, step)

    def achieved(self) -> set[str]:
        return {sid for sid, st in self.statuses.items() if st.status == "achieved"}


def _ancestors(step_id: str, by_id: dict[str, Step]) -> set[str]:
    out: set[str] = set()
    todo = list(by_id[step_id].prerequisites)
    while todo:
        cur = todo.pop()
        if cur in out:
            continue
        out.add(cur)
        todo.extend(by_id[cur].prerequisites)
    return out


def _is_help_invocation(nc: NormalizedCommand) -> bool:
    return nc.has_option("--help") or nc.has_option("-h")


def map_session(records: list[CommandRecord], scenario: ScenarioSpec,
                findings: list[Finding] | None = None) -> ProgressGraph:
    """Fold one session through the scenario's step matchers.

    Sequence numbers refer to positions in ``records`` (1-based, store
    order); evaluation itself runs in timestamp order.
    """
    if findings is None:
        findings = evaluate_session(records, scenario.context)[0] if records else []
    by_id = {s.step_id: s for s in scenario.steps}
    achieved: dict[str, StepStatus] = {}
    errors: list[ErrorEvent] = []

    ordered = sorted(enumerate(records, start=1), key=lambda kv: kv[1].timestamp)
    for seq, record in ordered:
        nc = normalize(record.cmd)
        hit = False
        for step in scenario.steps:
            if step.step_id in achieved:
                continue
            if match_command(nc, step.matcher):
                achieved[step.step_id] = StepStatus(
                    "achieved", timestamp=record.timestamp, seq=seq)
                hit = True
                for missing in sorted(_ancestors(step.step_id, by_id) - set(achieved)):
                    errors.append(ErrorEvent(
                        kind="order-violation", timestamp=record.timestamp,
                        seq=seq, step_id=missing, rule_id=None,
                        evidence=nc.canonical))
        if hit or _is_help_invocation(nc):
            continue
        for step in scenario.steps:
            if step.step_id not in achieved and _tool_matches(step.matcher.tool, nc.tool):
                errors.append(ErrorEvent(
                    kind="near-miss", timestamp=record.timestamp, seq=seq,
                    step_id=step.step_id, rule_id=None, evidence=nc.canonical))
                break

    for f in findings:
        tool = f.evidence.split(" ", 1)[0] if f.evidence else ""
        step_id = next((s.step_id for s in scenario.steps
                        if _tool_matches(s.matcher.tool, tool)), None)
        errors.append(ErrorEvent(
            kind="finding", timestamp=f.timestamp, seq=f.seq,
            step_id=step_id, rule_id=f.rule_id, evidence=f.evidence))

    omitted = set()
    for sid in achieved:
        omitted |= _ancestors(sid, by_id) - set(achieved)
    statuses = {}
    for step in scenario.steps:
        if step.step_id in achieved:
            statuses[step.step_id] = achieved[step.step_id]
        elif step.step_id in omitted:
            statuses[step.step_id] = StepStatus("omitted")
        else:
            statuses[step.step_id] = StepStatus("pending")
    errors.sort(key=lambda e: (e.timestamp, e.seq if e.seq is not None else 0))
    edges = [(pre, s.step_id) for s in scenario.steps for pre in s.prerequisites]
    return ProgressGraph(statuses=statuses, errors=errors, edges=edges)


# -- timeline ------------------------------------------------------------------


_KIND_ORDER = {"command": 0, "step-achieved": 1, "finding": 2}


@dataclass(frozen=True)
class TimelineEvent:
    timestamp: datetime
    kind: str                        # command | step-achieved | finding
    correct: bool | None
    payload: dict


def timeline(records: list[CommandRecord], findings: list[Finding],
             graph: ProgressGraph) -> list[TimelineEvent]:
    """Merge commands, achievements, and findings into one sorted feed.

    Equal timestamps order command < step-achieved < finding. A command is
    correct when it achieved a step, incorrect when a finding points at it,
    neutral otherwise (findings win when both apply).
    """
    achieving_seqs = {st.seq for st in graph.statuses.values()
                      if st.status == "achieved"}
    finding_seqs = {f.seq for f in findings if f.seq is not None}
    events: list[TimelineEvent] = []
    for seq, record in enumerate(records, start=1):
        if seq in finding_seqs:
            correct = False
        elif seq in achieving_seqs:
            correct = True
        else:
            correct = None
        events.append(TimelineEvent(
            timestamp=record.timestamp, kind="command", correct=correct,
            payload={"seq": seq, "cmd": record.cmd, "cmd_type": record.cmd_type},
        ))
    for step_id, st in graph.statuses.items():
        if st.status == "achieved":
            events.append(TimelineEvent(
                timestamp=st.timestamp, kind="step-achieved", correct=True,
                payload={"step_id": step_id, "seq": st.seq},
            ))
    for f in findings:
        events.append(TimelineEvent(
            timestamp=f.timestamp, kind="finding", correct=False,
            payload={"rule_id": f.rule_id, "severity": f.severity,
                     "seq": f.seq, "evidence": f.evidence},
        ))
    events.sort(key=lambda e: (e.timestamp, _KIND_ORDER[e.kind],
                               e.payload.get("seq") or 0))
    return events
