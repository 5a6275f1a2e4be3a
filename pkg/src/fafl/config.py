"""Experiment config files: strict TOML with typed fields and line-numbered errors.

Layout (every key optional; omitted keys take the defaults below)::

    clients = 10
    rounds = 100
    adversaries = 0
    encrypt = true
    eval_every = 1
    seed = 0
    workers = 1
    record_timing = true
    master_secret = ""          # 64 hex chars, or use FAFL_MASTER_SECRET

    [data]        source, classes, features, samples, separation, path,
                  label_column, group_column, holdout_fraction
    [model]       kind, hidden
    [partition]   alpha, max_labels
    [train]       learning_rate, decay, batch_size, local_epochs
    [mechanism]   name, gamma, rho, epsilon, zeta, dual_step, mixture_step,
                  beta, select, budget, cost_coeff, initial_reputation
    [network]     base_latency_ms, bandwidth_bytes_per_ms
"""

from __future__ import annotations

import dataclasses
import json
import re
import sys
import typing
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from .engine import DataConfig, ExperimentConfig, ModelConfig, NetworkModel, PartitionConfig
from .errors import ConfigError
from .mechanisms import MechanismConfig
from .model import TrainConfig

# file section -> (ExperimentConfig attribute, dataclass)
SECTIONS: dict[str, tuple[str, type]] = {
    "data": ("data", DataConfig),
    "model": ("model", ModelConfig),
    "partition": ("partition", PartitionConfig),
    "train": ("train", TrainConfig),
    "mechanism": ("mech", MechanismConfig),
    "network": ("network", NetworkModel),
}
# keys that exist on the dataclasses but are not settable from a file
_HIDDEN = {("train", "seed")}
# top-level keys that live on ExperimentConfig directly
_TOP_EXCLUDE = {"data", "model", "partition", "train", "mech", "network", "mechanism"}


def _field_types(cls: type) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _schema() -> dict[str, dict[str, type]]:
    top = {k: t for k, t in _field_types(ExperimentConfig).items() if k not in _TOP_EXCLUDE}
    out = {"": top}
    for name, (_, cls) in SECTIONS.items():
        out[name] = {k: t for k, t in _field_types(cls).items() if (name, k) not in _HIDDEN}
    out["mechanism"] = {"name": str, **out["mechanism"]}
    return out


_HEADER_RE = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY_RE = re.compile(r"""^\s*("[^"]*"|'[^']*'|[A-Za-z0-9_\-]+)\s*(\.|=)""")


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Best-effort map of (section, key) to 1-based line numbers."""
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for i, line in enumerate(text.splitlines(), 1):
        m = _HEADER_RE.match(line)
        if m:
            section = m.group(1)
            lines.setdefault((section, ""), i)
            continue
        m = _KEY_RE.match(line)
        if m:
            lines.setdefault((section, m.group(1).strip("\"'")), i)
    return lines


def _check_type(value, expected: type) -> bool:
    if expected is bool:
        return isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected is str:
        return isinstance(value, str)
    return False


class _Located:
    def __init__(self, source: str, lines: dict[tuple[str, str], int]):
        self.source = source
        self.lines = lines

    def error(self, message: str, section: str = "", key: str = "") -> ConfigError:
        line = self.lines.get((section, key)) or self.lines.get((section, ""))
        field = f"{section}.{key}" if section and key else (key or section or None)
        where = f"{self.source}:{line}" if line else self.source
        return ConfigError(f"{where}: {message}", field)


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    loc = _Located(source, _key_lines(text))
    schema = _schema()

    values: dict[str, dict] = {name: {} for name in schema}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in SECTIONS:
                raise loc.error(f"unknown section [{key}]", key)
            for sub, v in value.items():
                if sub not in schema[key]:
                    if isinstance(v, dict):
                        raise loc.error(f"unknown section [{key}.{sub}]", f"{key}.{sub}")
                    raise loc.error(f"unknown key {key}.{sub}", key, sub)
                values[key][sub] = v
        elif key not in schema[""]:
            raise loc.error(f"unknown key {key}", "", key)
        else:
            values[""][key] = value

    for section, entries in values.items():
        for key, v in entries.items():
            expected = schema[section][key]
            if not _check_type(v, expected):
                name = f"{section}.{key}" if section else key
                raise loc.error(
                    f"{name} must be of type {expected.__name__}, got {type(v).__name__}",
                    section, key,
                )
            if expected is float:
                entries[key] = float(v)

    top = dict(values[""])
    mech_values = dict(values["mechanism"])
    if "name" in mech_values:
        top["mechanism"] = mech_values.pop("name")
    nested = {}
    for section, (attr, cls) in SECTIONS.items():
        entries = mech_values if section == "mechanism" else values[section]
        try:
            nested[attr] = cls(**entries)
        except ConfigError as exc:
            raise loc.error(f"{section}.{exc}", section, exc.field or "") from None
    try:
        config = ExperimentConfig(**top, **nested).validate()
    except ConfigError as exc:
        section, key = _split_field(exc.field)
        raise loc.error(str(exc), section, key) from None
    return config


def _split_field(field: str | None) -> tuple[str, str]:
    if not field:
        return "", ""
    if field == "mechanism":
        return "mechanism", "name"
    section, _, key = field.rpartition(".")
    return section, key


def parse_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from None
    return parse_config_text(text, str(p))


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return json.dumps(v)


def dump_config(config: ExperimentConfig, *, include_secret: bool = False) -> str:
    """TOML text that :func:`parse_config_text` maps back to an equal config."""
    out = []
    for key in _schema()[""]:
        if key == "master_secret" and not include_secret:
            continue
        out.append(f"{key} = {_toml_value(getattr(config, key))}")
    for section, (attr, cls) in SECTIONS.items():
        out.append("")
        out.append(f"[{section}]")
        if section == "mechanism":
            out.append(f"name = {_toml_value(config.mechanism)}")
        obj = getattr(config, attr)
        for f in dataclasses.fields(cls):
            if (section, f.name) in _HIDDEN:
                continue
            out.append(f"{f.name} = {_toml_value(getattr(obj, f.name))}")
    return "\n".join(out) + "\n"


def write_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")
