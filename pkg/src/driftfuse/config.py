"""Structured text configuration: flat key=value sections.

Two sections are recognized. ``[data]`` holds the synthetic-stream
parameters (also used by ``train`` to locate the train/test split inside
each domain file) and ``[train]`` the training parameters. Keys map 1:1
onto the dataclass fields; ``lambda`` is accepted as an alias for ``lam``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import replace

from .data import SyntheticConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "load_config", "apply_overrides", "default_config_text"]


class ConfigError(Exception):
    """Raised for unreadable, unknown, or ill-typed configuration."""


_ALIASES = {"train": {"lambda": "lam"}}


def _coerce(field: dataclasses.Field, raw: str, where: str):
    kind = field.type
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _section_to_kwargs(cls, section: str, items: dict[str, str]) -> dict:
    fields = {f.name: f for f in dataclasses.fields(cls)}
    aliases = _ALIASES.get(section, {})
    kwargs = {}
    for key, raw in items.items():
        name = aliases.get(key, key)
        if name not in fields:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        kwargs[name] = _coerce(fields[name], raw, f"[{section}] {key}")
    return kwargs


def load_config(path: str | None) -> tuple[SyntheticConfig, TrainConfig]:
    """Parse a config file; a missing path yields the defaults."""
    if path is None:
        return SyntheticConfig(), TrainConfig()
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    known = {"data", "train"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    try:
        synth = SyntheticConfig(**_section_to_kwargs(
            SyntheticConfig, "data", dict(parser.items("data")) if parser.has_section("data") else {}))
        train = TrainConfig(**_section_to_kwargs(
            TrainConfig, "train", dict(parser.items("train")) if parser.has_section("train") else {}))
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return synth, train


def apply_overrides(
    synth: SyntheticConfig, train: TrainConfig, overrides: list[str]
) -> tuple[SyntheticConfig, TrainConfig]:
    """Apply ``section.key=value`` overrides on top of parsed configs."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section == "data":
            kwargs = _section_to_kwargs(SyntheticConfig, "data", {key: raw})
            try:
                synth = replace(synth, **kwargs)
            except ValueError as exc:
                raise ConfigError(f"{item}: {exc}") from exc
        elif section == "train":
            kwargs = _section_to_kwargs(TrainConfig, "train", {key: raw})
            try:
                train = replace(train, **kwargs)
            except ValueError as exc:
                raise ConfigError(f"{item}: {exc}") from exc
        else:
            raise ConfigError(f"unknown section {section!r} in override {item!r}")
    return synth, train


def default_config_text() -> str:
    """Render the full schema with default values, as a commented template."""
    lines = ["# driftfuse configuration: flat key=value sections", ""]
    for section, obj in (("data", SyntheticConfig()), ("train", TrainConfig())):
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    return "\n".join(lines)
