"""Flat key=value run configuration.

Every field of ModelSpec, PriorSpec and TrainConfig is addressable under a
namespace prefix (model.*, prior.*, train.*). Unknown keys, malformed lines
and duplicate keys fail loudly; '#' starts a comment.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass
from pathlib import Path

from . import nets, prior, trainer


class ConfigError(ValueError):
    pass


_NAMESPACES = {
    "model": nets.ModelSpec,
    "prior": prior.PriorSpec,
    "train": trainer.TrainConfig,
}


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(key, raw, tp):
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        inner = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", "null"):
            return None
        tp = inner[0]
    if tp is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if tp is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if tp is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if tp is str:
        return raw
    raise ConfigError(f"{key}: unsupported field type {tp!r}")


def parse_pairs(text, source="<config>"):
    """key=value lines into an ordered dict of strings."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {body!r}")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


@dataclass
class Config:
    model: nets.ModelSpec
    prior: prior.PriorSpec
    train: trainer.TrainConfig
    # which fields each namespace set explicitly, for inherit-unless-set logic
    explicit: dict


def from_pairs(pairs):
    hints = {ns: _hints(cls) for ns, cls in _NAMESPACES.items()}
    updates = {ns: {} for ns in _NAMESPACES}
    for key, raw in pairs.items():
        ns, dot, name = key.partition(".")
        if not dot or ns not in _NAMESPACES:
            raise ConfigError(
                f"unknown config key {key!r} (keys are namespaced "
                f"model.*, prior.* or train.*)"
            )
        if name not in hints[ns]:
            raise ConfigError(f"unknown config key {key!r}")
        updates[ns][name] = _coerce(key, raw, hints[ns][name])
    return Config(
        model=nets.ModelSpec(**updates["model"]),
        prior=prior.PriorSpec(**updates["prior"]),
        train=trainer.TrainConfig(**updates["train"]),
        explicit={ns: set(fields) for ns, fields in updates.items()},
    )


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return from_pairs(parse_pairs(text, source=str(path)))


def config_help():
    """One line per addressable key with its default, for --help output."""
    lines = ["config file: one key=value per line, '#' comments; keys:"]
    for ns, cls in _NAMESPACES.items():
        for f in dataclasses.fields(cls):
            lines.append(f"  {ns}.{f.name} = {f.default}")
    return "\n".join(lines)
