"""Line-based ``key = value`` config files."""
from __future__ import annotations

import hashlib
from typing import Dict, Mapping

from .errors import ConfigError


def parse_kv(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def read_kv(path: str) -> Dict[str, str]:
    try:
        with open(path) as fh:
            return parse_kv(fh.read(), path)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None


def format_kv(values: Mapping[str, object]) -> str:
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def write_kv(path: str, values: Mapping[str, object]) -> None:
    with open(path, "w") as fh:
        fh.write(format_kv(values))


def fingerprint(values: Mapping[str, object]) -> str:
    return hashlib.sha256(format_kv(values).encode()).hexdigest()[:16]
