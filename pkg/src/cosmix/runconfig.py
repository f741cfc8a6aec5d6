"""Run configuration files: flat ``key = value`` text covering every
training, augmentation, and model field. Unknown keys are errors, and a
resolved copy (all defaults materialized) is written into each run
directory so a run can be replayed bit-exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .augment import AugmentConfig
from .errors import ConfigError
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunSettings:
    train: TrainConfig
    augment: AugmentConfig
    model: ModelConfig


def _cast_for(default):
    if isinstance(default, bool):
        def cast(s):
            if s not in ("true", "false", "True", "False"):
                raise ValueError(f"expected true/false, got {s!r}")
            return s in ("true", "True")
        return cast
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return lambda s: tuple(int(x.strip()) for x in s.split(","))
    return str


def _key_table():
    table = {}
    for section, cls in (("train", TrainConfig), ("augment", AugmentConfig),
                         ("model", ModelConfig)):
        for f in fields(cls):
            key = f.name if section != "model" else f"model_{f.name}"
            if key in table:
                raise AssertionError(f"duplicate config key {key}")
            table[key] = (section, f.name, _cast_for(f.default))
    return table


_KEYS = _key_table()


def parse_config(text, source="<config>"):
    """Parse ``key = value`` lines; '#' starts a comment; keys may appear once."""
    values = {"train": {}, "augment": {}, "model": {}}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        section, field_name, cast = _KEYS[key]
        try:
            values[section][field_name] = cast(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        return RunSettings(train=TrainConfig(**values["train"]),
                           augment=AugmentConfig(**values["augment"]),
                           model=ModelConfig(**values["model"]))
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"), source=str(path))


def format_config(settings):
    """All keys with their resolved values, one per line, definition order."""
    out = []
    for section, cfg in (("train", settings.train), ("augment", settings.augment),
                         ("model", settings.model)):
        for f in fields(type(cfg)):
            key = f.name if section != "model" else f"model_{f.name}"
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{key} = {v}")
    return "\n".join(out) + "\n"


def default_settings():
    return RunSettings(train=TrainConfig(), augment=AugmentConfig(), model=ModelConfig())
