"""Shared pytest plumbing: acceptance pass/fail lines in the terminal summary."""

import time
from contextlib import contextmanager

ACCEPTANCE_RESULTS: list[str] = []


@contextmanager
def acceptance(number: int, title: str, limit_s: float | None = None):
    """Times one acceptance criterion and records a pass/fail summary line."""
    limit = f"limit {limit_s:g}s" if limit_s is not None else "no limit"
    started = time.monotonic()
    try:
        yield
    except BaseException:
        elapsed = time.monotonic() - started
        ACCEPTANCE_RESULTS.append(
            f"FAIL  criterion {number}: {title} ({elapsed:.2f}s, {limit})")
        raise
    elapsed = time.monotonic() - started
    line = f"PASS  criterion {number}: {title} ({elapsed:.2f}s, {limit})"
    if limit_s is not None and elapsed >= limit_s:
        ACCEPTANCE_RESULTS.append(line.replace("PASS", "FAIL", 1) + " — over limit")
        raise AssertionError(
            f"criterion {number} exceeded its runtime limit: "
            f"{elapsed:.2f}s >= {limit_s:g}s")
    ACCEPTANCE_RESULTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(line)
