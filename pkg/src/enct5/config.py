"""Flat ``key = value`` config files for models, training runs and tasks.

Lines are ``key = value``; blank lines and ``#`` comments are ignored. A
training config may start from a named preset with ``preset = desk`` (or
``published``); later keys override the preset. Tuple-valued task fields take
comma-separated lists.

Example model config::

    d_model = 64
    d_ff = 128
    num_heads = 4
    d_kv = 16
    num_encoder_layers = 2
    num_decoder_layers = 2
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .model import ModelConfig
from .tasks import TaskSpec, synthetic_spec
from .training import PRESETS, TrainConfig


class ConfigFileError(ValueError):
    """One or more config fields are invalid; ``problems`` lists each one."""

    def __init__(self, source: str, problems: list[str]) -> None:
        super().__init__(f"{source}: " + "; ".join(problems))
        self.problems = problems


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    problems = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {n}: expected key = value")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            problems.append(f"line {n}: duplicate key {key!r}")
        out[key] = value
    if problems:
        raise ConfigFileError(source, problems)
    return out


def format_flat(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (tuple, list)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, dict):
            continue
        lines.append(f"{k} = {'' if v is None else v}")
    return "\n".join(lines) + "\n"


def _coerce(kind, raw: str):
    origin = typing.get_origin(kind)
    args = [a for a in typing.get_args(kind) if a is not type(None)]
    if origin is typing.Union or (origin is not None and type(None) in typing.get_args(kind)):
        if raw.lower() in ("", "none"):
            return None
        return _coerce(args[0], raw)
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if origin is tuple or kind is tuple:
        return tuple(s.strip() for s in raw.split(",") if s.strip())
    return raw


def _build(cls, values: dict[str, str], source: str, base=None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    problems = []
    kwargs = {}
    for key, raw in values.items():
        if key not in names:
            problems.append(f"unknown field {key!r}")
            continue
        try:
            kwargs[key] = _coerce(hints[key], raw)
        except ValueError as err:
            problems.append(f"field {key!r}: {err}")
    if problems:
        raise ConfigFileError(source, problems)
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except ValueError as err:
        raise ConfigFileError(source, [str(err)]) from None


def model_config_from_text(text: str, source: str = "<model config>") -> ModelConfig:
    return _build(ModelConfig, parse_flat(text, source), source)


def load_model_config(path: str | Path) -> ModelConfig:
    return model_config_from_text(Path(path).read_text(), str(path))


def train_config_from_text(text: str, source: str = "<train config>") -> TrainConfig:
    values = parse_flat(text, source)
    base = None
    preset = values.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigFileError(source, [f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"])
        base = PRESETS[preset]
    return _build(TrainConfig, values, source, base)


def load_train_config(arg: str) -> TrainConfig:
    """A preset name (``desk``, ``published``) or a config file path."""
    if arg in PRESETS:
        return PRESETS[arg]
    return train_config_from_text(Path(arg).read_text(), arg)


def load_task_spec(arg: str) -> TaskSpec:
    """``synthetic:<generator>[:size[:seed]]`` or a task file.

    Task files use the :class:`TaskSpec` field names; ``train``,
    ``validation`` and ``test`` keys give data file paths relative to the
    task file.
    """
    if arg.startswith("synthetic:"):
        parts = arg.split(":")
        size = int(parts[2]) if len(parts) > 2 and parts[2] else 1000
        seed = int(parts[3]) if len(parts) > 3 else 0
        return synthetic_spec(parts[1], seed=seed, size=size)
    path = Path(arg)
    values = parse_flat(path.read_text(), arg)
    files = {}
    for split in ("train", "validation", "test"):
        if split in values:
            p = Path(values.pop(split))
            files[split] = str(p if p.is_absolute() else path.parent / p)
    if "name" not in values:
        values["name"] = path.stem
    spec = _build(TaskSpec, values, arg)
    spec.files = files
    return spec
