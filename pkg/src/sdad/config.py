"""Run configuration: JSON file with environment interpolation.

Config files are plain JSON; string values may reference environment
variables as ``${VAR}``.  Command-line flags override file values.  Unknown
keys are rejected so typos fail loudly instead of being ignored.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from .backend import BackendConfig
from .errors import ConfigError

ENV_BACKEND_URL = "SDAD_BACKEND_URL"
ENV_LOG = "SDAD_LOG"

_TOP_KEYS = {
    "manifest",
    "palette",
    "bank",
    "embeddings",
    "plan",
    "backend",
    "out",
    "log_level",
}
_BACKEND_KEYS = {
    "endpoint",
    "seed",
    "dimension",
    "timeout",
    "max_inflight",
    "retries",
    "backoff_base",
}

_VAR = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


def interpolate_env(obj, env: Optional[Mapping[str, str]] = None):
    """Replace ``${VAR}`` in every string with its environment value."""
    env = os.environ if env is None else env

    def sub(text: str) -> str:
        def repl(match):
            name = match.group(1)
            if name not in env:
                raise ConfigError(f"environment variable {name!r} is not set")
            return env[name]

        return _VAR.sub(repl, text)

    if isinstance(obj, str):
        return sub(obj)
    if isinstance(obj, list):
        return [interpolate_env(x, env) for x in obj]
    if isinstance(obj, dict):
        return {k: interpolate_env(v, env) for k, v in obj.items()}
    return obj


@dataclass(frozen=True)
class RunConfig:
    """Validated effective configuration for one command invocation."""

    manifest: Optional[str] = None
    palette: Optional[str] = None
    bank: Optional[str] = None
    embeddings: Optional[str] = None
    plan: Optional[dict] = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    out: Optional[str] = None
    log_level: Optional[str] = None

    def require_paths(self) -> None:
        """Referenced input files must exist by validation time."""
        for name in ("manifest", "palette", "bank", "embeddings"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name} path does not exist: {value}")

    def echo(self) -> dict:
        """The effective settings, for embedding into output provenance."""
        out: dict[str, object] = {}
        for name in ("manifest", "palette", "bank", "embeddings", "out", "log_level"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        if self.plan is not None:
            out["plan"] = self.plan
        backend: dict[str, object] = {
            "seed": self.backend.seed,
            "dimension": self.backend.dimension,
        }
        if self.backend.endpoint:
            backend["endpoint"] = self.backend.endpoint
        out["backend"] = backend
        return out


def load_config(path, env: Optional[Mapping[str, str]] = None) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text("utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    obj = interpolate_env(obj, env)
    return config_from_dict(obj)


def config_from_dict(obj: dict) -> RunConfig:
    unknown = set(obj) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
    backend_obj = obj.get("backend", {})
    if not isinstance(backend_obj, dict):
        raise ConfigError("backend section must be an object")
    unknown = set(backend_obj) - _BACKEND_KEYS
    if unknown:
        raise ConfigError(f"unknown backend key {sorted(unknown)[0]!r}")
    try:
        backend = BackendConfig(**backend_obj)
    except TypeError as e:
        raise ConfigError(f"bad backend section: {e}") from e
    plan = obj.get("plan")
    if plan is not None and not isinstance(plan, dict):
        raise ConfigError("plan section must be an object")
    return RunConfig(
        manifest=obj.get("manifest"),
        palette=obj.get("palette"),
        bank=obj.get("bank"),
        embeddings=obj.get("embeddings"),
        plan=plan,
        backend=backend,
        out=obj.get("out"),
        log_level=obj.get("log_level"),
    )
