"""key=value configuration files with QCTRL_-prefixed environment overrides."""

from __future__ import annotations

import os
from pathlib import Path

ENV_PREFIX = "QCTRL_"


class ConfigError(ValueError):
    pass


def parse_key_values(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        out[key] = value.strip()
    return out


def read_key_values(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_key_values(text, str(path))


def env_overrides(environ=None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    return {
        key[len(ENV_PREFIX):].lower(): value
        for key, value in environ.items()
        if key.startswith(ENV_PREFIX)
    }


def load_config(path: str | Path | None, defaults: dict[str, str] | None = None, environ=None) -> dict[str, str]:
    """Defaults, then the file, then QCTRL_* environment variables."""
    cfg = dict(defaults or {})
    if path is not None:
        cfg.update(read_key_values(path))
    cfg.update(env_overrides(environ))
    return cfg
