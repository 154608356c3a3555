"""Flat ``key = value`` run configuration shared by the CLI and checkpoints."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Union

from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathConfig:
    data: str = field(default="", metadata={"help": "dataset directory (empty: synthesize num_samples in memory)"})
    metrics_log: str = field(default="", metadata={"help": "per-step metrics log (empty: <checkpoint>.log)"})


SECTIONS = (("model", ModelConfig), ("train", TrainConfig), ("paths", PathConfig))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)


def _key_index() -> dict[str, tuple[str, Any]]:
    index = {}
    for section, cls in SECTIONS:
        for f in fields(cls):
            if f.name in index:
                raise RuntimeError(f"duplicate config key {f.name}")
            index[f.name] = (section, f)
    return index


KEYS = _key_index()


def key_help() -> list[tuple[str, str, str]]:
    """``(key, default, help)`` for every config key, in file order."""
    defaults = RunConfig()
    return [(k, _format(getattr(getattr(defaults, s), k)), f.metadata.get("help", ""))
            for k, (s, f) in KEYS.items()]


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_scalar(text: str, kind: type, key: str):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def _parse_value(text: str, default, key: str):
    if isinstance(default, tuple):
        kind = type(default[0]) if default else float
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_parse_scalar(t, kind, key) for t in items)
    return _parse_scalar(text, type(default), key)


def serialize(cfg: RunConfig, comments: bool = True) -> str:
    lines = []
    for section, _ in SECTIONS:
        obj = getattr(cfg, section)
        if comments:
            lines.append(f"# [{section}]")
        for f in fields(obj):
            if comments and f.metadata.get("help"):
                lines.append(f"# {f.metadata['help']}")
            lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        if comments:
            lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


def parse(text: str, base: RunConfig = None) -> RunConfig:
    """Parse config text; unknown keys, duplicates and malformed lines are errors."""
    base = base or RunConfig()
    updates: dict[str, dict[str, Any]] = {s: {} for s, _ in SECTIONS}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        seen.add(key)
        section, f = KEYS[key]
        default = getattr(getattr(base, section), key)
        updates[section][key] = _parse_value(value, default, key)
    try:
        return RunConfig(**{s: replace(getattr(base, s), **updates[s]) for s, _ in SECTIONS})
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load(path: Union[str, Path]) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse(text)
