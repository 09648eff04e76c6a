"""Flat ``key = value`` config files with dotted keys for nested sections.

Resolution order: dataclass defaults, then the config file, then
``--override`` pairs. Unknown keys are errors.
"""
import copy
import dataclasses

from .core import ConfigError, InvalidSpec
from .trainer import TrainConfig

# config-file spelling -> attribute name
_RENAMES = {"lambda": "lam"}
_ATTR_TO_KEY = {v: k for k, v in _RENAMES.items()}


def _leaves(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + _ATTR_TO_KEY.get(f.name, f.name)
        if dataclasses.is_dataclass(value):
            yield from _leaves(value, key + ".")
        else:
            yield key, value


def to_flat(cfg):
    return dict(_leaves(cfg))


def _coerce(text, current, key):
    text = text.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def _set(cfg, key, text):
    parts = key.strip().split(".")
    target = cfg
    for part in parts[:-1]:
        if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    attr = _RENAMES.get(parts[-1], parts[-1])
    names = {f.name for f in dataclasses.fields(target)}
    if attr not in names or dataclasses.is_dataclass(getattr(target, attr)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, attr, _coerce(text, getattr(target, attr), key))


def parse_text(text):
    pairs = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def parse_overrides(items):
    pairs = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def apply_overrides(cfg, pairs):
    cfg = copy.deepcopy(cfg)
    for key, value in pairs.items():
        _set(cfg, key, value)
    return cfg


def load_config(path=None, overrides=None):
    cfg = TrainConfig()
    if path:
        with open(path) as fh:
            cfg = apply_overrides(cfg, parse_text(fh.read()))
    cfg = apply_overrides(cfg, parse_overrides(overrides))
    try:
        cfg.validate()
    except (ValueError, InvalidSpec) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def dump_config(cfg):
    lines = ["# fully resolved configuration"]
    for key, value in to_flat(cfg).items():
        lines.append(f"{key} = {value!r}" if isinstance(value, float) else f"{key} = {value}")
    return "\n".join(lines) + "\n"
