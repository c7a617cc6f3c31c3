"""Run configuration: one TOML file with a section per component, every
field also settable from the command line as ``--<section>-<field>``.

Precedence is dataclass default < config file < command-line flag.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .mapping import MapBuildConfig
from .pnp import MatchConfig, PnPConfig
from .refine import RefinerConfig
from .retrieval import RetrievalConfig
from .synthetic import NoiseConfig, SceneConfig


@dataclass
class RunSettings:
    workers: int = 1
    log_level: str = "INFO"

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class EvalSettings:
    preset: str = "outdoor"
    thresholds: Optional[str] = None

    def __post_init__(self):
        if self.preset not in ("outdoor", "indoor"):
            raise ValueError("preset must be 'outdoor' or 'indoor'")


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    map: MapBuildConfig = field(default_factory=MapBuildConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    pnp: PnPConfig = field(default_factory=PnPConfig)
    refine: RefinerConfig = field(default_factory=RefinerConfig)
    run: RunSettings = field(default_factory=RunSettings)
    evaluate: EvalSettings = field(default_factory=EvalSettings)

    def localizer(self):
        from .pipeline import LocalizerConfig

        return LocalizerConfig(self.retrieval, self.match, self.pnp, self.refine)


SECTIONS = tuple(f.name for f in dataclasses.fields(RunConfig))


def _section_type(name: str) -> type:
    return get_type_hints(RunConfig)[name]


def _field_kind(tp) -> tuple[type, bool]:
    """(scalar type, is_sequence) of a config field annotation."""
    if get_origin(tp) is Union:
        tp = next(a for a in get_args(tp) if a is not type(None))
    if get_origin(tp) is tuple:
        return get_args(tp)[0], True
    return tp, False


def _coerce(value: Any, tp, where: str):
    scalar, seq = _field_kind(tp)
    if value is None:
        return None
    if seq:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(_coerce_scalar(v, scalar, where) for v in value)
    return _coerce_scalar(value, scalar, where)


def _coerce_scalar(value, scalar, where):
    try:
        if scalar is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if scalar is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if scalar is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if scalar is str:
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        pass
    else:
        return value
    raise ConfigError(f"{where}: expected {scalar.__name__}, got {value!r}")


def _section_from_dict(name: str, data: dict, base=None):
    cls = _section_type(name)
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key: {name}.{unknown[0]}")
    values = {f: getattr(base, f) for f in known} if base is not None else {}
    for k, v in data.items():
        values[k] = _coerce(v, hints[k], f"{name}.{k}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def config_from_dict(data: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Build a config from nested mappings; unknown sections or keys raise ConfigError."""
    base = base or RunConfig()
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    kwargs = {}
    for name in SECTIONS:
        sec = data.get(name)
        if sec is None:
            kwargs[name] = getattr(base, name)
        elif not isinstance(sec, dict):
            raise ConfigError(f"unknown config key: {name} (expected a [{name}] table)")
        else:
            kwargs[name] = _section_from_dict(name, sec, getattr(base, name))
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(type(v))


def dump_config(cfg: RunConfig) -> str:
    """TOML text for ``cfg``; ``None`` fields are left out."""
    out = []
    for name in SECTIONS:
        sec = getattr(cfg, name)
        out.append(f"[{name}]")
        for f in dataclasses.fields(sec):
            v = getattr(sec, f.name)
            if v is not None:
                out.append(f"{f.name} = {_toml_value(v)}")
        out.append("")
    return "\n".join(out)


# --- command-line flags ------------------------------------------------------

class _Unset:
    def __repr__(self):
        return "<unset>"


UNSET = _Unset()


def _flag(section: str, fname: str) -> str:
    return f"--{section}-{fname.replace('_', '-')}"


def _dest(section: str, fname: str) -> str:
    return f"cfg__{section}__{fname}"


def add_config_flags(parser: argparse.ArgumentParser, sections) -> None:
    """One flag per field of each listed section, with its default in the help."""
    defaults = RunConfig()
    for name in sections:
        sec = getattr(defaults, name)
        hints = get_type_hints(type(sec))
        group = parser.add_argument_group(f"[{name}] settings")
        for f in dataclasses.fields(sec):
            scalar, seq = _field_kind(hints[f.name])
            default = getattr(sec, f.name)
            shown = ",".join(str(x) for x in default) if seq else default
            kw: dict = dict(dest=_dest(name, f.name), default=UNSET, help=f"(default: {shown})")
            if scalar is bool:
                kw["action"] = argparse.BooleanOptionalAction
            else:
                kw["metavar"] = "LIST" if seq else scalar.__name__.upper()
            group.add_argument(_flag(name, f.name), **kw)


def config_from_args(args: argparse.Namespace, config_path=None) -> RunConfig:
    cfg = load_config(config_path) if config_path else RunConfig()
    overrides: dict[str, dict] = {}
    for key, val in vars(args).items():
        if key.startswith("cfg__") and val is not UNSET:
            _, sec, fname = key.split("__", 2)
            overrides.setdefault(sec, {})[fname] = val
    if not overrides:
        return cfg
    # flags arrive as strings; coerce through the same path as file values
    typed: dict[str, dict] = {}
    for sec, vals in overrides.items():
        hints = get_type_hints(_section_type(sec))
        typed[sec] = {}
        for k, v in vals.items():
            scalar, seq = _field_kind(hints[k])
            if isinstance(v, str) and not seq and scalar is not str:
                try:
                    v = float(v) if scalar is float else int(v)
                except ValueError:
                    raise ConfigError(f"{_flag(sec, k)}: expected {scalar.__name__}, got {v!r}") from None
            typed[sec][k] = v
    return config_from_dict(typed, cfg)


def write_default_config(path) -> None:
    Path(path).write_text(dump_config(RunConfig()))
