"""Service configuration: one JSON file covering listeners, store, and API."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields

__all__ = ["BadConfig", "ServiceConfig", "load_config"]

ENV_VAR = "CMDTRACE_CONFIG"


class BadConfig(ValueError):
    pass


@dataclass
class ServiceConfig:
    store_dir: str = "./cmdtrace-store"
    scenario_path: str | None = None       # bundled scenario when unset
    api_host: str = "127.0.0.1"
    api_port: int = 8765
    syslog_host: str = "0.0.0.0"
    udp_port: int | None = 5514
    tcp_port: int | None = 5514
    tls_port: int | None = None
    tls_cert: str | None = None
    tls_key: str | None = None
    hmac_key: str | None = None            # hex-encoded shared secret
    cors_origins: tuple[str, ...] = ()
    heartbeat: float = 15.0
    forward_to: str | None = None          # "host:port" upstream relay

    def validate(self) -> "ServiceConfig":
        if self.heartbeat <= 0:
            raise BadConfig("heartbeat must be positive")
        for name in ("api_port", "udp_port", "tcp_port", "tls_port"):
            value = getattr(self, name)
            if value is not None and not 0 <= value <= 65535:
                raise BadConfig(f"{name} out of range: {value}")
        if self.tls_port is not None and not (self.tls_cert and self.tls_key):
            raise BadConfig("tls_port needs tls_cert and tls_key")
        if self.hmac_key is not None:
            try:
                bytes.fromhex(self.hmac_key)
            except ValueError:
                raise BadConfig("hmac_key must be hex") from None
        if self.forward_to is not None:
            host, sep, port = self.forward_to.rpartition(":")
            if not sep or not host or not port.isdigit():
                raise BadConfig(f"forward_to must be host:port: {self.forward_to!r}")
        return self


def load_config(path: str | None = None, **overrides) -> ServiceConfig:
    """Config from an explicit path, else $CMDTRACE_CONFIG, else defaults.

    Keyword overrides (CLI flags) win over file values; unknown keys in
    either place are rejected rather than silently ignored.
    """
    path = path or os.environ.get(ENV_VAR)
    doc = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise BadConfig(f"{path}: {e}") from None
        if not isinstance(doc, dict):
            raise BadConfig(f"{path}: top level must be an object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(ServiceConfig)}
    unknown = set(doc) - known
    if unknown:
        raise BadConfig("unknown config keys: " + ", ".join(sorted(unknown)))
    if "cors_origins" in doc:
        if not isinstance(doc["cors_origins"], (list, tuple)):
            raise BadConfig("cors_origins must be a list")
        doc["cors_origins"] = tuple(doc["cors_origins"])
    return ServiceConfig(**doc).validate()
