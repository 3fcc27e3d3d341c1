from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

from src.errors import ConfigurationError, UsageError

Value = Union[int, float, bool, str]


def parse_value(raw: str) -> Value:
    text = raw.strip()
    if text.lower() in ("true", "yes", "on"):
        return True
    if text.lower() in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> Dict[str, Value]:
    """``key = value`` lines; ``#`` starts a comment. Keys use CLI spelling with ``_`` or ``-``."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values: Dict[str, Value] = {}
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if not key:
            raise ConfigurationError(f"{path}:{n}: empty key")
        values[key] = parse_value(raw)
    return values


@dataclass(frozen=True)
class RunConfig:
    """Resolved arguments of one CLI invocation."""
    subcommand: str
    seed: int = 0
    threads: int = 1
    output_dir: Optional[Path] = None
    paths: Dict[str, Path] = field(default_factory=dict)
    options: Dict[str, Value] = field(default_factory=dict)

    def check_inputs(self):
        for name, p in sorted(self.paths.items()):
            if not Path(p).exists():
                raise UsageError(f"--{name.replace('_', '-')}: no such file or directory: {p}")
