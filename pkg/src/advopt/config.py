"""Option handling for the CLI.

Precedence: command-line flags override config-file values override
built-in defaults.  Config files are line-based ``key = value`` with
``#`` comments; keys match flag names without the leading dashes.
Every run writes a fully resolved effective-config record next to its
outputs, and re-running from that record reproduces the run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass(frozen=True)
class Opt:
    flag: str
    kind: str  # "int" | "float" | "str" | "bool" | "list"
    default: Any = None
    required: bool = False
    help: str = ""

    @property
    def dest(self) -> str:
        return self.flag.replace("-", "_")


def parse_scalar(opt: Opt, text: str):
    text = text.strip()
    if text.lower() == "none":
        return None
    try:
        if opt.kind == "int":
            return int(text)
        if opt.kind == "float":
            return float(text)
        if opt.kind == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if opt.kind == "list":
            return [t for t in text.split(",") if t]
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {opt.flag}: {text!r}") from exc


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and '#' comments ignored."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def resolve(command: str, schema: list[Opt], cli_values: dict[str, Any],
            file_values: dict[str, str]) -> dict[str, Any]:
    """Merge the three layers into a fully typed option map."""
    known = {o.flag for o in schema}
    for key in file_values:
        if key == "command":
            if file_values[key] != command:
                raise ConfigError(
                    f"config file is for command {file_values[key]!r}, not {command!r}")
        elif key not in known:
            raise ConfigError(f"unknown config key {key!r} for command {command!r}")
    out: dict[str, Any] = {}
    for opt in schema:
        cli = cli_values.get(opt.dest)
        if cli is not None:
            out[opt.dest] = cli
        elif opt.flag in file_values:
            out[opt.dest] = parse_scalar(opt, file_values[opt.flag])
        else:
            out[opt.dest] = opt.default
        if out[opt.dest] is None and opt.required:
            raise ConfigError(f"missing required option --{opt.flag}")
    return out


def write_effective(path, command: str, schema: list[Opt], values: dict[str, Any]) -> None:
    lines = [f"command = {command}"]
    for opt in sorted(schema, key=lambda o: o.flag):
        lines.append(f"{opt.flag} = {format_value(values[opt.dest])}")
    Path(path).write_text("\n".join(lines) + "\n")
