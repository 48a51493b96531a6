"""Post-hoc analysis of command records.

Covers the instructor-facing questions: which tools were used and how often,
how many commands each session produced, how the work was paced (gaps between
successive commands), how sessions began, and whether two per-session
quantities correlate. Everything here is a pure function over record lists;
stores are adapted via :func:`sessions_from_store`.
"""

from __future__ import annotations

import itertools
import json
import math
import shlex
import statistics
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

from scipy.stats import t as _t_dist

from cmdtrace.records import CommandRecord

__all__ = [
    "ConstantInput",
    "EmptyCommand",
    "FirstAction",
    "GapCohort",
    "GapStats",
    "LengthMismatch",
    "NormalizedCommand",
    "CohortRow",
    "SessionCount",
    "StatsTable",
    "TooFewPoints",
    "first_action",
    "gap_cohort",
    "gap_series",
    "load_arity_table",
    "normalize",
    "session_stats",
    "sessions_from_store",
    "spearman",
    "tool_frequency",
]


class EmptyCommand(ValueError):
    """normalize() got whitespace or nothing."""


def load_arity_table() -> dict[str, dict[str, int]]:
    """Per-tool map of dash-stripped flag name → number of values it takes."""
    raw = resources.files("cmdtrace").joinpath("data/flag_arity.json").read_text("utf-8")
    return json.loads(raw)


_ARITY = load_arity_table()


@dataclass(frozen=True)
class NormalizedCommand:
    """A command reduced to tool + order-insensitive options + positionals."""

    tool: str
    options: tuple[tuple[str, str | None], ...]   # sorted (flag, value) pairs
    positionals: tuple[str, ...]                  # original order
    canonical: str

    def has_option(self, flag: str) -> bool:
        return any(f == flag for f, _ in self.options)

    def option_value(self, flag: str) -> str | None:
        for f, v in self.options:
            if f == flag:
                return v
        return None


def _tokenize(cmd: str) -> list[str]:
    try:
        return shlex.split(cmd, posix=True)
    except ValueError:
        return cmd.split()   # unbalanced quoting: degrade to whitespace split


def _quote_token(tok: str) -> str:
    return shlex.quote(tok) if tok else "''"


def normalize(cmd: str, arity: dict[str, dict[str, int]] | None = None) -> NormalizedCommand:
    """Collapse whitespace, pair flags with values, sort the option pairs.

    A token starting with ``-`` is an option; ``--flag=value`` splits at the
    first ``=``; otherwise the tool's arity table decides whether the next
    token is the flag's value (unknown flags take none). The canonical text
    re-quotes tokens so that normalize(canonical) is a fixed point.
    """
    if not cmd or not cmd.strip():
        raise EmptyCommand("empty command")
    table = arity if arity is not None else _ARITY
    tokens = _tokenize(cmd)
    if not tokens:
        raise EmptyCommand("only quoting characters")
    tool = tokens[0]
    arities = table.get(tool, {})
    options: list[tuple[str, str | None]] = []
    positionals: list[str] = []
    i = 1
    while i < len(tokens):
        tok = tokens[i]
        if len(tok) > 1 and tok.startswith("-"):
            if "=" in tok:
                flag, value = tok.split("=", 1)
                options.append((flag, value))
            elif arities.get(tok.lstrip("-"), 0) == 1 and i + 1 < len(tokens):
                options.append((tok, tokens[i + 1]))
                i += 1
            else:
                options.append((tok, None))
        else:
            positionals.append(tok)
        i += 1
    options.sort(key=lambda p: (p[0], p[1] or ""))
    parts = [_quote_token(tool)]
    for flag, value in options:
        if value is None:
            parts.append(_quote_token(flag))
        elif not flag.startswith("--") and arities.get(flag.lstrip("-"), 0) == 1:
            parts.append(f"{_quote_token(flag)} {_quote_token(value)}")
        else:
            # `=`-joined so re-normalizing cannot split the pair apart.
            parts.append(_quote_token(f"{flag}={value}"))
    parts.extend(_quote_token(p) for p in positionals)
    return NormalizedCommand(
        tool=tool,
        options=tuple(options),
        positionals=tuple(positionals),
        canonical=" ".join(parts),
    )


def tool_frequency(records: list[CommandRecord]) -> dict[str, int]:
    """Histogram of normalized tool names, descending count then name."""
    counts = Counter(normalize(r.cmd).tool for r in records)
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


# -- session statistics --------------------------------------------------------


def sessions_from_store(store) -> dict[str, list[CommandRecord]]:
    return {sid: list(store.read(sid)) for sid in store.sandboxes()}


@dataclass(frozen=True)
class SessionCount:
    sandbox_id: str
    bash: int
    msf: int

    @property
    def total(self) -> int:
        return self.bash + self.msf


@dataclass(frozen=True)
class CohortRow:
    """One Total/Min/Max/Median/Avg/Stdev row over per-session values."""

    total: int
    min: int
    max: int
    median: float
    avg: float
    stdev: float


@dataclass
class StatsTable:
    sessions: list[SessionCount]
    cohort: dict[str, CohortRow]   # keys: "bash-command", "msf-command", "both"


def _cohort_row(values: list[int]) -> CohortRow:
    return CohortRow(
        total=sum(values),
        min=min(values),
        max=max(values),
        median=float(statistics.median(values)),
        avg=statistics.fmean(values),
        stdev=statistics.stdev(values) if len(values) > 1 else 0.0,
    )


def session_stats(sessions: dict[str, list[CommandRecord]]) -> StatsTable:
    """Per-session command counts by type plus cohort rows (sample stdev, n−1)."""
    counts = [
        SessionCount(
            sandbox_id=sid,
            bash=sum(1 for r in recs if r.cmd_type == "bash-command"),
            msf=sum(1 for r in recs if r.cmd_type == "msf-command"),
        )
        for sid, recs in sorted(sessions.items())
    ]
    if not counts:
        return StatsTable(sessions=[], cohort={})
    cohort = {
        "bash-command": _cohort_row([c.bash for c in counts]),
        "msf-command": _cohort_row([c.msf for c in counts]),
        "both": _cohort_row([c.total for c in counts]),
    }
    return StatsTable(sessions=counts, cohort=cohort)


# -- gaps ------------------------------------------------------------------------


@dataclass
class GapStats:
    sandbox_id: str
    duration: int                  # whole seconds, first → last command
    gaps: list[int]                # whole-second gaps; Σ gaps == duration
    median: float | None           # None for sessions with < 2 commands
    avg: float | None
    stdev: float | None            # None with < 2 commands; 0.0 for exactly one gap


def gap_series(records: list[CommandRecord]) -> GapStats:
    """Whole-second gaps between successive commands of one session.

    Timestamps are floored to epoch seconds before differencing, so the gap
    list telescopes: Σ gaps = duration exactly.
    """
    if not records:
        raise ValueError("empty session")
    ordered = sorted(records, key=lambda r: r.timestamp)
    sid = ordered[0].sandbox_id
    floors = [math.floor(r.timestamp.timestamp()) for r in ordered]
    gaps = [b - a for a, b in zip(floors, floors[1:])]
    if not gaps:
        return GapStats(sid, 0, [], None, None, None)
    return GapStats(
        sandbox_id=sid,
        duration=floors[-1] - floors[0],
        gaps=gaps,
        median=float(statistics.median(gaps)),
        avg=statistics.fmean(gaps),
        stdev=statistics.stdev(gaps) if len(gaps) > 1 else 0.0,
    )


@dataclass
class GapCohort:
    """Cohort Min/Max/Median/Avg/Stdev over per-session duration and avg gap."""

    game_time: CohortRow | None
    avg_gap: CohortRow | None
    sessions: list[GapStats] = field(default_factory=list)


def _float_row(values: list[float]) -> CohortRow:
    return CohortRow(
        total=sum(values),
        min=min(values),
        max=max(values),
        median=float(statistics.median(values)),
        avg=statistics.fmean(values),
        stdev=statistics.stdev(values) if len(values) > 1 else 0.0,
    )


def gap_cohort(sessions: dict[str, list[CommandRecord]]) -> GapCohort:
    """Per-session quantities first, then cohort statistics over them."""
    per = [gap_series(recs) for _, recs in sorted(sessions.items()) if recs]
    durations = [float(g.duration) for g in per]
    avgs = [g.avg for g in per if g.avg is not None]
    return GapCohort(
        game_time=_float_row(durations) if durations else None,
        avg_gap=_float_row(avgs) if avgs else None,
        sessions=per,
    )


# -- rank correlation --------------------------------------------------------------


class LengthMismatch(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class ConstantInput(ValueError):
    """All-equal input: rank correlation is undefined."""


def _average_ranks(values: list[float]) -> list[float]:
    """1-based ranks; tied values share the average of their rank span."""
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg_rank = (i + j + 2) / 2          # ranks i+1 .. j+1, averaged
        for k in range(i, j + 1):
            ranks[order[k]] = avg_rank
        i = j + 1
    return ranks


#: Below this size the t-approximation is too coarse (its error against the
#: exact permutation distribution exceeds a few percent), so we enumerate.
EXACT_P_MAX_N = 8


def _exact_permutation_p(cx: list[float], cy: list[float],
                         denom: float, observed: float) -> float:
    """Share of rank permutations at least as extreme as the observed |ρ|."""
    hits = total = 0
    for perm in itertools.permutations(cy):
        s = 0.0
        for a, b in zip(cx, perm):
            s += a * b
        if abs(s) / denom >= observed - 1e-12:
            hits += 1
        total += 1
    return hits / total


def spearman(x: list[float], y: list[float]) -> tuple[float, float]:
    """Rank correlation on average ranks, with a two-sided p-value.

    p is exact 0.0 when ρ = ±1. For n ≤ 8 the p comes from the exact
    permutation distribution of the ranks; for larger n from the
    t-approximation p = 2·P(T ≥ |ρ·√((n−2)/(1−ρ²))|) with n−2 degrees of
    freedom.
    """
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} vs {len(y)} points")
    n = len(x)
    if n < 3:
        raise TooFewPoints(f"need at least 3 points, got {n}")
    rx = _average_ranks(list(x))
    ry = _average_ranks(list(y))
    mean = (n + 1) / 2                       # mean rank, exact
    cx = [r - mean for r in rx]
    cy = [r - mean for r in ry]
    sxx = sum(c * c for c in cx)
    syy = sum(c * c for c in cy)
    if sxx == 0 or syy == 0:
        raise ConstantInput("an input is constant; rank correlation undefined")
    if cx == cy:
        return 1.0, 0.0            # identical rankings: exact by construction
    if all(a == -b for a, b in zip(cx, cy)):
        return -1.0, 0.0
    denom = math.sqrt(sxx * syy)
    rho = sum(a * b for a, b in zip(cx, cy)) / denom
    if abs(rho) >= 1.0:
        return (1.0 if rho > 0 else -1.0), 0.0
    if n <= EXACT_P_MAX_N:
        return rho, _exact_permutation_p(cx, cy, denom, abs(rho))
    t_stat = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = 2.0 * float(_t_dist.sf(abs(t_stat), n - 2))
    return rho, min(p, 1.0)


# -- first action -------------------------------------------------------------------


ORIENTATION_TOOLS = frozenset({"ifconfig", "ip", "ping", "ls", "pwd", "cd", "man", "help"})

#: Tools that say nothing about intent either way; they block the orientation
#: class without triggering off-task.
NEUTRAL_TOOLS = frozenset({
    "cat", "echo", "clear", "history", "whoami", "id", "hostname", "uname",
    "date", "exit", "less", "more", "which", "env", "touch", "true",
})


@dataclass(frozen=True)
class FirstAction:
    sandbox_id: str
    klass: str                    # task-start | orientation | off-task | unknown
    matched_tool: str | None
    target_correct: bool | None   # None when no targets configured / not task-start
    commands: tuple[str, ...]     # canonical forms of the examined window


def _is_help_form(nc: NormalizedCommand) -> bool:
    return nc.has_option("--help") or nc.has_option("-h") or nc.tool in ("man", "help")


def first_action(records: list[CommandRecord], *, k: int = 5,
                 start_tools: tuple[str, ...] = ("nmap",),
                 targets: frozenset[str] = frozenset()) -> FirstAction:
    """Classify how a session began from its first k commands."""
    if not records:
        raise ValueError("empty session")
    window = sorted(records, key=lambda r: r.timestamp)[:k]
    ncs = [normalize(r.cmd) for r in window]
    canon = tuple(nc.canonical for nc in ncs)
    sid = window[0].sandbox_id

    started = [nc for nc in ncs if nc.tool in start_tools]
    if started:
        correct = None
        if targets:
            correct = any(p in targets for nc in started for p in nc.positionals)
        return FirstAction(sid, "task-start", started[0].tool, correct, canon)

    def oriented(nc):
        return nc.tool in ORIENTATION_TOOLS or _is_help_form(nc)

    if all(oriented(nc) for nc in ncs):
        return FirstAction(sid, "orientation", ncs[0].tool, None, canon)
    strangers = [nc for nc in ncs if not oriented(nc) and nc.tool not in NEUTRAL_TOOLS]
    if strangers:
        return FirstAction(sid, "off-task", strangers[0].tool, None, canon)
    return FirstAction(sid, "unknown", None, None, canon)
