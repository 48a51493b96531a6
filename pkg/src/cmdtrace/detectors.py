"""Rule engine for misconceptions and unusual activity in command streams.

Stateless checks cover nmap target handling and john wordlist usage; a small
per-sandbox automaton follows the Metasploit console's expected
search → use → set → run course of action and flags deviations. Targets,
router addresses, network ranges, and the expected module/LHOST come from the
scenario configuration, not from code.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from datetime import datetime

from cmdtrace.analytics import NormalizedCommand, normalize
from cmdtrace.records import CommandRecord

__all__ = [
    "RULES",
    "DetectorContext",
    "Finding",
    "MsfSessionState",
    "OutOfOrderRecord",
    "evaluate",
    "evaluate_session",
    "off_by_one_digit",
]

RULES = (
    "NMAP_NO_TARGET",
    "NMAP_PING_ONLY",
    "NMAP_ROUTER_TARGET",
    "NMAP_TYPO_IP",
    "NMAP_OUT_OF_SCOPE",
    "JOHN_NO_WORDLIST",
    "JOHN_WORDLIST_DIR",
    "MSF_SET_BEFORE_USE",
    "MSF_RUN_BEFORE_SET",
    "MSF_WRONG_MODULE",
    "MSF_NO_SEARCH",
    "MSF_LHOST_WRONG",
)

_SEVERITY = {rule: "warning" for rule in RULES}
_SEVERITY["NMAP_OUT_OF_SCOPE"] = "error"
_SEVERITY["MSF_NO_SEARCH"] = "info"


class OutOfOrderRecord(ValueError):
    """A record arrived with a timestamp earlier than one already evaluated."""


@dataclass(frozen=True)
class Finding:
    rule_id: str
    sandbox_id: str
    timestamp: datetime
    seq: int | None
    severity: str
    explanation: str
    evidence: str                 # canonical form of the offending command


@dataclass
class MsfSessionState:
    """Where one sandbox stands in the search → use → set → run course."""

    searched: bool = False
    selected_module: str | None = None
    set_params: dict[str, str] = field(default_factory=dict)
    ran: bool = False
    last_timestamp: datetime | None = None


@dataclass(frozen=True)
class DetectorContext:
    """Scenario ground truth the rules check commands against."""

    targets: frozenset[str] = frozenset()
    routers: frozenset[str] = frozenset()
    cidrs: tuple[str, ...] = ()
    expected_module: str | None = None
    expected_lhost: str | None = None
    required_params: tuple[str, ...] = ()
    wordlist_dirs: frozenset[str] = frozenset()

    def networks(self):
        return [ipaddress.ip_network(c) for c in self.cidrs]


def off_by_one_digit(candidate: str, reference: str) -> bool:
    """Equal-length strings differing in exactly one character, both digits."""
    if len(candidate) != len(reference) or candidate == reference:
        return False
    diffs = [(a, b) for a, b in zip(candidate, reference) if a != b]
    return len(diffs) == 1 and diffs[0][0].isdigit() and diffs[0][1].isdigit()


def _is_ipv4(text: str) -> bool:
    try:
        ipaddress.IPv4Address(text)
        return True
    except ValueError:
        return False


def _finding(rule: str, record: CommandRecord, seq: int | None,
             nc: NormalizedCommand, explanation: str) -> Finding:
    return Finding(
        rule_id=rule,
        sandbox_id=record.sandbox_id,
        timestamp=record.timestamp,
        seq=seq,
        severity=_SEVERITY[rule],
        explanation=explanation,
        evidence=nc.canonical,
    )


def _nmap_rules(record, seq, nc: NormalizedCommand, ctx: DetectorContext) -> list[Finding]:
    if nc.has_option("--help") or nc.has_option("-h"):
        return []                              # asking for help is not a mistake
    out = []
    if not nc.positionals and not (nc.has_option("-iL") or nc.has_option("--iL")):
        out.append(_finding("NMAP_NO_TARGET", record, seq, nc,
                            "scan started without any target"))
    if nc.has_option("-sn") or nc.has_option("--sn"):
        out.append(_finding("NMAP_PING_ONLY", record, seq, nc,
                            "-sn disables the port scan; only host discovery ran"))
    networks = ctx.networks()
    for target in nc.positionals:
        classified = _classify_target(target, ctx, networks)
        if classified is None:
            continue
        rule, why = classified
        out.append(_finding(rule, record, seq, nc, why))
    return out


def _classify_target(target: str, ctx: DetectorContext, networks) -> tuple[str, str] | None:
    # First match wins: exact target > router > one-digit typo > scope check.
    if _is_ipv4(target):
        if target in ctx.targets:
            return None
        if target in ctx.routers:
            return ("NMAP_ROUTER_TARGET",
                    f"{target} is the sandbox router, not an exercise target")
        for ref in ctx.targets:
            if off_by_one_digit(target, ref):
                return ("NMAP_TYPO_IP",
                        f"{target} is one digit away from target {ref}")
        addr = ipaddress.IPv4Address(target)
        if networks and not any(addr in net for net in networks):
            return ("NMAP_OUT_OF_SCOPE",
                    f"{target} is outside the sandbox network ranges")
        return None
    try:
        span = ipaddress.ip_network(target, strict=False)
    except ValueError:
        return None                            # hostname or file: out of rule scope
    if networks and not any(span.subnet_of(net) for net in networks):
        return ("NMAP_OUT_OF_SCOPE",
                f"{target} is outside the sandbox network ranges")
    return None


_JOHN_EXEMPT = ("--show", "--test", "--list", "--restore", "--single",
                "--incremental", "--help", "-h", "--status")


def _john_rules(record, seq, nc: NormalizedCommand, ctx: DetectorContext) -> list[Finding]:
    wordlist = None
    has_wordlist = False
    for flag, value in nc.options:
        if flag in ("--wordlist", "-w", "--w"):
            has_wordlist = True
            wordlist = value
    out = []
    if not has_wordlist:
        if not any(nc.has_option(f) for f in _JOHN_EXEMPT):
            out.append(_finding("JOHN_NO_WORDLIST", record, seq, nc,
                                "dictionary attack without --wordlist"))
        return out
    if wordlist is not None and (
            wordlist.rstrip("/") in {d.rstrip("/") for d in ctx.wordlist_dirs}
            or wordlist.endswith("/")):
        out.append(_finding("JOHN_WORDLIST_DIR", record, seq, nc,
                            "--wordlist points at a directory, not a file"))
    return out


def _msf_rules(record, seq, nc: NormalizedCommand, state: MsfSessionState,
               ctx: DetectorContext) -> list[Finding]:
    out = []
    tool = nc.tool
    args = list(nc.positionals)
    if tool == "search":
        state.searched = True
    elif tool == "use" and args:
        module = args[0]
        state.selected_module = module
        if ctx.expected_module is not None and module != ctx.expected_module:
            out.append(_finding("MSF_WRONG_MODULE", record, seq, nc,
                                f"selected {module}, expected {ctx.expected_module}"))
        elif not state.searched:
            out.append(_finding("MSF_NO_SEARCH", record, seq, nc,
                                "module selected without a prior search; "
                                "suggests prior knowledge or outside help"))
    elif tool == "set" and args:
        name = args[0].upper()
        value = args[1] if len(args) > 1 else ""
        if state.selected_module is None:
            out.append(_finding("MSF_SET_BEFORE_USE", record, seq, nc,
                                "set issued before any module was selected"))
        state.set_params[name] = value
        if (name == "LHOST" and ctx.expected_lhost is not None
                and value != ctx.expected_lhost):
            out.append(_finding("MSF_LHOST_WRONG", record, seq, nc,
                                f"LHOST {value} is not the attacker machine "
                                f"{ctx.expected_lhost}"))
    elif tool == "unset" and args:
        state.set_params.pop(args[0].upper(), None)
    elif tool == "back":
        state.selected_module = None
    elif tool in ("exploit", "run"):
        missing = [p for p in ctx.required_params
                   if p.upper() not in state.set_params]
        if missing:
            out.append(_finding("MSF_RUN_BEFORE_SET", record, seq, nc,
                                "run before setting " + ", ".join(missing)))
        state.ran = True
    return out


def evaluate(record: CommandRecord, state: MsfSessionState,
             ctx: DetectorContext, seq: int | None = None) -> list[Finding]:
    """Apply every rule to one record, updating the Metasploit automaton.

    Records of one sandbox must arrive in timestamp order; a regression
    raises OutOfOrderRecord.
    """
    if state.last_timestamp is not None and record.timestamp < state.last_timestamp:
        raise OutOfOrderRecord(
            f"{record.timestamp.isoformat()} after {state.last_timestamp.isoformat()}")
    state.last_timestamp = record.timestamp
    nc = normalize(record.cmd)
    if record.cmd_type == "msf-command":
        return _msf_rules(record, seq, nc, state, ctx)
    if nc.tool == "nmap":
        return _nmap_rules(record, seq, nc, ctx)
    if nc.tool == "john":
        return _john_rules(record, seq, nc, ctx)
    return []


def evaluate_session(records: list[CommandRecord],
                     ctx: DetectorContext) -> tuple[list[Finding], MsfSessionState]:
    """Timestamp-sort one sandbox's records and fold them through evaluate."""
    state = MsfSessionState()
    findings: list[Finding] = []
    ordered = sorted(enumerate(records, start=1), key=lambda kv: kv[1].timestamp)
    for seq, record in ordered:
        findings.extend(evaluate(record, state, ctx, seq=seq))
    return findings, state
