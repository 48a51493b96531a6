"""cmdtrace command line: serve, replay, hook, analyze, report.

Exit codes are a stable contract for scripts: 0 success, 1 usage error,
2 data error (unreadable store/trace/config, failed sends, bind failure).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time

from cmdtrace import __version__
from cmdtrace.agent import (
    TRANSPORTS,
    HookConfig,
    InvalidConfig,
    MalformedTraceJson,
    NonMonotonicTimestamps,
    emit_hook_snippet,
    load_trace,
    replay_trace,
)
from cmdtrace.api import BindFailure, start_service
from cmdtrace.config import BadConfig, load_config
from cmdtrace.progress import (
    CyclicPrerequisites,
    MalformedScenario,
    bundled_scenario_path,
    load_scenario,
)
from cmdtrace.report import build_report, render_json, render_text
from cmdtrace.store import CentralStore, StoreError
from cmdtrace.wire import DEFAULT_PRI

__all__ = ["main"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):                 # argparse would sys.exit(2)
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="cmdtrace",
                     description="Command telemetry for training sandboxes")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run collector, store, and HTTP API")
    serve.add_argument("--config", help="JSON config file (or $CMDTRACE_CONFIG)")
    serve.add_argument("--store-dir")
    serve.add_argument("--scenario", dest="scenario_path")
    serve.add_argument("--api-host")
    serve.add_argument("--api-port", type=int)
    serve.add_argument("--syslog-host")
    serve.add_argument("--udp-port", type=int)
    serve.add_argument("--tcp-port", type=int)
    serve.add_argument("--tls-port", type=int)
    serve.add_argument("--tls-cert")
    serve.add_argument("--tls-key")
    serve.add_argument("--hmac-key", dest="hmac_key")
    serve.add_argument("--heartbeat", type=float)
    serve.add_argument("--forward-to", dest="forward_to")

    replay = sub.add_parser("replay", help="send a stored trace to a collector")
    replay.add_argument("trace", help="JSON-lines trace file")
    replay.add_argument("--host", required=True)
    replay.add_argument("--port", type=int, required=True)
    replay.add_argument("--transport", choices=TRANSPORTS, default="tcp")
    replay.add_argument("--speed", default="1",
                        help="gap divisor, or 'max' for back-to-back")
    replay.add_argument("--pri", type=int, default=DEFAULT_PRI)
    replay.add_argument("--hmac-key", dest="hmac_key")
    replay.add_argument("--allow-unsorted", action="store_true")

    hook = sub.add_parser("hook", help="print the bash logging hook snippet")
    hook.add_argument("--sandbox-id", required=True)
    hook.add_argument("--host", required=True)
    hook.add_argument("--port", type=int, default=5514)
    hook.add_argument("--transport", choices=TRANSPORTS, default="udp")
    hook.add_argument("--facility-priority", type=int, default=DEFAULT_PRI)
    hook.add_argument("--source-ip")

    analyze = sub.add_parser("analyze", help="print one analysis section")
    analyze.add_argument("--store-dir", required=True)
    analyze.add_argument("--report", dest="section", default="stats",
                         choices=("stats", "gaps", "first", "freq", "findings"))
    analyze.add_argument("--scenario", dest="scenario_path")
    analyze.add_argument("--json", action="store_true")

    report = sub.add_parser("report", help="print the full report")
    report.add_argument("--store-dir", required=True)
    report.add_argument("--scenario", dest="scenario_path")
    report.add_argument("--json", action="store_true")
    return parser


def _open_store(store_dir: str) -> CentralStore:
    if not os.path.isdir(store_dir):
        raise StoreError(f"store directory not found: {store_dir}")
    return CentralStore(store_dir)


def _scenario(path: str | None):
    return load_scenario(path or bundled_scenario_path())


def _cmd_serve(args) -> int:
    overrides = {k: getattr(args, k) for k in (
        "store_dir", "scenario_path", "api_host", "api_port", "syslog_host",
        "udp_port", "tcp_port", "tls_port", "tls_cert", "tls_key",
        "hmac_key", "heartbeat", "forward_to")}
    config = load_config(args.config, **overrides)
    os.makedirs(config.store_dir, exist_ok=True)
    handle = start_service(config)
    print(f"store: {config.store_dir}")
    print(f"api: http://{handle.api.host}:{handle.api.port}")
    for label, port in (("udp", config.udp_port), ("tcp", config.tcp_port),
                        ("tls", config.tls_port)):
        if port is not None:
            print(f"syslog {label}: {config.syslog_host}:{port}")
    sys.stdout.flush()
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        handle.stop()
    return EXIT_OK


def _cmd_replay(args) -> int:
    if args.speed == "max":
        speed = math.inf
    else:
        try:
            speed = float(args.speed)
        except ValueError:
            raise UsageError(f"bad --speed value: {args.speed}") from None
    if speed <= 0:
        raise UsageError("--speed must be positive")
    trace = load_trace(args.trace, allow_unsorted=args.allow_unsorted)
    hmac_key = bytes.fromhex(args.hmac_key) if args.hmac_key else None
    result = replay_trace(trace, args.host, args.port, transport=args.transport,
                          speed=speed, pri=args.pri, hmac_key=hmac_key)
    print(f"sent {result.sent}/{len(trace)} records "
          f"in {result.wall_time:.2f}s (failed {result.failed})")
    return EXIT_OK if result.failed == 0 else EXIT_DATA


def _cmd_hook(args) -> int:
    cfg = HookConfig(
        sandbox_id=args.sandbox_id, host=args.host, port=args.port,
        transport=args.transport, facility_priority=args.facility_priority,
        source_ip=args.source_ip)
    print(emit_hook_snippet(cfg), end="")
    return EXIT_OK


_ANALYZE_SECTIONS = {
    "stats": ("counts", "commands"),
    "gaps": ("time", "gaps"),
    "first": ("first", "first_actions"),
    "freq": ("freq", "tool_frequency"),
    "findings": ("findings", "findings"),
}


def _cmd_analyze(args) -> int:
    store = _open_store(args.store_dir)
    try:
        scenario = _scenario(args.scenario_path)
        doc = build_report(store, scenario)
    finally:
        store.close()
    text_section, json_key = _ANALYZE_SECTIONS[args.section]
    if args.json:
        print(json.dumps({json_key: doc[json_key]}, indent=2))
    else:
        print(render_text(doc, sections=(text_section,)), end="")
    return EXIT_OK


def _cmd_report(args) -> int:
    store = _open_store(args.store_dir)
    try:
        scenario = _scenario(args.scenario_path)
        doc = build_report(store, scenario)
    finally:
        store.close()
    print(render_json(doc) if args.json else render_text(doc), end="")
    if args.json:
        print()
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"cmdtrace: {e}", file=sys.stderr)
        return EXIT_USAGE
    handlers = {
        "serve": _cmd_serve,
        "replay": _cmd_replay,
        "hook": _cmd_hook,
        "analyze": _cmd_analyze,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (UsageError, InvalidConfig) as e:
        print(f"cmdtrace: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (BadConfig, MalformedScenario, CyclicPrerequisites, StoreError,
            MalformedTraceJson, NonMonotonicTimestamps, BindFailure,
            OSError, ValueError) as e:
        print(f"cmdtrace: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
