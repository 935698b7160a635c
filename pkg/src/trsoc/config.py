"""INI configuration: one section per module, flat keys.

See ``docs/config.md`` for the full key list and defaults.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import fields
from pathlib import Path

from .driver import RunConfig

SECTIONS = {
    "problem": ("problem", "dim", "problem_seed", "horizon", "steps", "integrator"),
    "losses": ("loss", "socm_times"),
    "trustregion": ("epsilon", "delta", "trust_region"),
    "driver": ("buffer_size", "inner_steps", "batch", "max_outer", "seed", "lr", "clip", "net"),
    "metrics": ("eval_every", "eval_samples", "eval_window", "checkpoint_every", "wall_time"),
}

_TYPES = {f.name: f.type for f in fields(RunConfig)}
_SECTION_OF = {k: s for s, keys in SECTIONS.items() for k in keys}
assert set(_SECTION_OF) == set(_TYPES), "every RunConfig field needs a config section"


class ConfigError(ValueError):
    pass


def _parse(key, raw: str):
    typ = str(_TYPES[key])
    raw = raw.strip()
    try:
        if typ in ("int",):
            return int(raw)
        if typ in ("float",):
            return float(raw)
        if typ in ("bool",):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if "Optional[int]" in typ:
            return None if raw.lower() in ("", "none", "auto") else int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{_SECTION_OF[key]}.{key}: cannot parse {raw!r} as {typ}") from None


def _render(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = (base or RunConfig()).to_dict()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]; valid: {', '.join(SECTIONS)}")
        for key, raw in cp.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"{section}.{key}: unknown key")
            values[key] = _parse(key, raw)
    cfg = RunConfig.from_dict(values)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return loads(p.read_text())


def dumps(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    d = cfg.to_dict()
    for section, keys in SECTIONS.items():
        cp[section] = {k: _render(d[k]) for k in keys}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
