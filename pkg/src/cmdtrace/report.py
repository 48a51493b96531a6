"""Operator reports: one JSON document and an aligned-text view of it.

build_report folds a whole store through the analytics, detector, and
progress modules; render_json / render_text emit the same numbers in both
formats. The JSON converters double as the HTTP API's serializers.
"""

from __future__ import annotations

import json

from cmdtrace.analytics import (
    CohortRow,
    first_action,
    gap_cohort,
    session_stats,
    sessions_from_store,
    tool_frequency,
)
from cmdtrace.detectors import Finding, evaluate_session
from cmdtrace.progress import ProgressGraph, ScenarioSpec, TimelineEvent, map_session
from cmdtrace.records import CommandRecord, to_canonical_json

__all__ = [
    "build_report",
    "finding_json",
    "format_mss",
    "graph_json",
    "record_json",
    "render_json",
    "render_text",
    "timeline_json",
]


def format_mss(seconds: float) -> str:
    """Whole seconds as m:ss, the duration notation of session timelines."""
    s = int(seconds)
    return f"{s // 60}:{s % 60:02d}"


def record_json(record: CommandRecord, seq: int | None = None) -> dict:
    doc = json.loads(to_canonical_json(record))
    if seq is not None:
        doc["seq"] = seq
    return doc


def finding_json(f: Finding) -> dict:
    return {
        "rule_id": f.rule_id,
        "sandbox_id": f.sandbox_id,
        "timestamp": f.timestamp.isoformat(),
        "seq": f.seq,
        "severity": f.severity,
        "explanation": f.explanation,
        "evidence": f.evidence,
    }


def graph_json(graph: ProgressGraph, scenario: ScenarioSpec) -> dict:
    return {
        "steps": [{"id": s.step_id, "title": s.title} for s in scenario.steps],
        "edges": [list(edge) for edge in graph.edges],
        "statuses": {
            sid: {
                "status": st.status,
                "timestamp": st.timestamp.isoformat() if st.timestamp else None,
                "seq": st.seq,
            }
            for sid, st in graph.statuses.items()
        },
        "errors": [
            {
                "kind": e.kind,
                "timestamp": e.timestamp.isoformat(),
                "seq": e.seq,
                "step_id": e.step_id,
                "rule_id": e.rule_id,
                "evidence": e.evidence,
            }
            for e in graph.errors
        ],
    }


def timeline_json(events: list[TimelineEvent]) -> list[dict]:
    return [
        {
            "timestamp": e.timestamp.isoformat(),
            "kind": e.kind,
            "correct": e.correct,
            "payload": e.payload,
        }
        for e in events
    ]


def _row_json(row: CohortRow | None) -> dict | None:
    if row is None:
        return None
    return {"total": row.total, "min": row.min, "max": row.max,
            "median": row.median, "avg": row.avg, "stdev": row.stdev}


def build_report(store, scenario: ScenarioSpec) -> dict:
    sessions = sessions_from_store(store)
    table = session_stats(sessions)
    gaps = gap_cohort(sessions)
    all_records = [r for recs in sessions.values() for r in recs]

    first_rows = []
    findings_rows = []
    progress_rows = []
    for sid in sorted(sessions):
        records = sessions[sid]
        if not records:
            continue
        fa = first_action(records, start_tools=scenario.start_tools,
                          targets=scenario.context.targets)
        first_rows.append({
            "sandbox_id": sid,
            "class": fa.klass,
            "matched_tool": fa.matched_tool,
            "target_correct": fa.target_correct,
        })
        findings, _ = evaluate_session(records, scenario.context)
        findings_rows.extend(finding_json(f) for f in findings)
        graph = map_session(records, scenario, findings=findings)
        statuses = graph.statuses.values()
        progress_rows.append({
            "sandbox_id": sid,
            "achieved": sum(1 for st in statuses if st.status == "achieved"),
            "omitted": sum(1 for st in statuses if st.status == "omitted"),
            "pending": sum(1 for st in statuses if st.status == "pending"),
            "steps": {k: st.status for k, st in graph.statuses.items()},
        })

    return {
        "sandboxes": sorted(sessions),
        "commands": {
            "sessions": [
                {"sandbox_id": c.sandbox_id, "bash": c.bash,
                 "msf": c.msf, "total": c.total}
                for c in table.sessions
            ],
            "cohort": {kind: _row_json(row) for kind, row in table.cohort.items()},
        },
        "gaps": {
            "sessions": [
                {"sandbox_id": g.sandbox_id, "duration": g.duration,
                 "gaps": g.gaps, "median": g.median, "avg": g.avg,
                 "stdev": g.stdev}
                for g in gaps.sessions
            ],
            "cohort": {"game_time": _row_json(gaps.game_time),
                       "avg_gap": _row_json(gaps.avg_gap)},
        },
        "tool_frequency": tool_frequency(all_records),
        "first_actions": first_rows,
        "findings": findings_rows,
        "progress": progress_rows,
    }


def render_json(doc: dict) -> str:
    return json.dumps(doc, indent=2)


def _num(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, (int, float)):
        return json.dumps(value)
    return str(value)


def _table(headers: list[str], rows: list[list]) -> list[str]:
    grid = [headers] + [[_num(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in grid) for i in range(len(headers))]
    return ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in grid]


_COHORT_COLS = ["total", "min", "max", "median", "avg", "stdev"]

SECTIONS = ("counts", "time", "freq", "first", "findings", "progress")


def _render_counts(doc, lines):
    lines.append("Command counts per session")
    lines += _table(
        ["Command type", "Total", "Min", "Max", "Median", "Avg", "Stdev"],
        [[kind] + [row[c] for c in _COHORT_COLS]
         for kind, row in doc["commands"]["cohort"].items()],
    )
    lines.append("")
    lines += _table(
        ["Sandbox", "Bash", "Msf", "Total"],
        [[s["sandbox_id"], s["bash"], s["msf"], s["total"]]
         for s in doc["commands"]["sessions"]],
    )


def _render_time(doc, lines):
    lines.append("Session time (seconds)")
    lines += _table(
        ["Quantity", "Min", "Max", "Median", "Avg", "Stdev"],
        [[name] + [row[c] for c in _COHORT_COLS[1:]]
         for name, row in doc["gaps"]["cohort"].items() if row is not None],
    )
    lines.append("")
    for g in doc["gaps"]["sessions"]:
        lines.append(
            f"sandbox {g['sandbox_id']}: duration {format_mss(g['duration'])}"
            f"  gaps {' '.join(str(x) for x in g['gaps'])}"
            f"  median {_num(g['median'])} avg {_num(g['avg'])}"
            f" stdev {_num(g['stdev'])}".rstrip())


def _render_freq(doc, lines):
    lines.append("Tool frequency")
    lines += _table(["Tool", "Count"], list(doc["tool_frequency"].items()))


def _render_first(doc, lines):
    lines.append("First actions")
    lines += _table(
        ["Sandbox", "Class", "Tool", "Target correct"],
        [[r["sandbox_id"], r["class"], r["matched_tool"], r["target_correct"]]
         for r in doc["first_actions"]],
    )


def _render_findings(doc, lines):
    lines.append("Findings")
    lines += _table(
        ["Sandbox", "Seq", "Rule", "Severity", "Evidence"],
        [[f["sandbox_id"], f["seq"], f["rule_id"], f["severity"], f["evidence"]]
         for f in doc["findings"]],
    )


def _render_progress(doc, lines):
    lines.append("Progress")
    lines += _table(
        ["Sandbox", "Achieved", "Omitted", "Pending"],
        [[p["sandbox_id"], p["achieved"], p["omitted"], p["pending"]]
         for p in doc["progress"]],
    )


_RENDERERS = {
    "counts": _render_counts,
    "time": _render_time,
    "freq": _render_freq,
    "first": _render_first,
    "findings": _render_findings,
    "progress": _render_progress,
}


def render_text(doc: dict, sections: tuple[str, ...] = SECTIONS) -> str:
    lines: list[str] = []
    for name in sections:
        _RENDERERS[name](doc, lines)
        lines.append("")
    while lines and lines[-1] == "":
        lines.pop()
    return "\n".join(lines) + "\n"
