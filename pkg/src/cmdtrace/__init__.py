"""Command telemetry for hands-on training sandboxes.

Collects shell-command events from Linux hosts over the Syslog protocol,
stores them centrally as canonical JSON lines, and analyzes them: frequency
and timing statistics, misconception detection, and progress mapping against
a reference solution, with a streaming HTTP API for live dashboards.
"""

from cmdtrace.records import CommandRecord

__version__ = "0.1.0"

__all__ = ["CommandRecord", "__version__"]
