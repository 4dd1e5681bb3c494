"""INI run configuration with ``section.key=value`` overrides.

A config file has up to three sections::

    [data]
    data_dir = synth
    schema = synth/schema.ini
    vocab = synth/vocab.json     ; optional, built from the training CSVs otherwise
    min_count = 1

    [train]
    seed = 0
    learning_rate = 0.001
    deep_layers = 64,32
    ...                          ; any RunConfig field

    [synth]
    divergence = 0.5             ; any SynthSpec field (gen-synth only)

Precedence, lowest to highest: built-in defaults, the config file, then
command-line flags (dedicated flags and ``--set section.key=value``).
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ConfigError
from .synth import SynthSpec
from .training import RunConfig


def _coerce(default: Any, raw: str, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, enum.Enum):
            return type(default)(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


def apply(obj, section: Mapping[str, str], section_name: str):
    defaults = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in defaults:
            raise ConfigError(f"unknown key {section_name}.{key}")
        updates[key] = _coerce(defaults[key], raw, f"{section_name}.{key}")
    try:
        return dataclasses.replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section_name}] settings: {exc}") from None


@dataclass
class DataConfig:
    data_dir: str = ""
    schema: str = ""
    vocab: str = ""
    min_count: int = 1


@dataclass
class CliConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: RunConfig = field(default_factory=RunConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def to_ini(self, sections: Iterable[str] = ("data", "train")) -> str:
        lines = []
        for name in sections:
            obj = getattr(self, name)
            lines.append(f"[{name}]")
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)


def parse_overrides(items: Iterable[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value
    return out


def load(text: str | None = None, overrides: Mapping[str, Mapping[str, str]] | None = None) -> CliConfig:
    sections: dict[str, dict[str, str]] = {}
    if text:
        cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"bad config file: {exc}") from None
        for name in cp.sections():
            sections[name] = dict(cp[name])
    for name, sec in (overrides or {}).items():
        sections.setdefault(name, {}).update(sec)
    cfg = CliConfig()
    for name, sec in sections.items():
        if name not in ("data", "train", "synth"):
            raise ConfigError(f"unknown config section [{name}]")
        setattr(cfg, name, apply(getattr(cfg, name), sec, name))
    return cfg


def load_file(path: str | Path | None, overrides=None) -> CliConfig:
    text = None
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return load(text, overrides)
