"""Run configuration files and run manifests.

A config file is INI-style text with up to three sections, each holding
``key = value`` lines for one dataclass::

    [model]
    channel_plan = 64, 128, 256
    fusion = early_fused

    [train]
    epochs = 50

    [synth]
    n_per_class = 100

Tuples are comma-separated; booleans accept true/false/yes/no/1/0.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .model import ModelConfig
from .synth import SynthSpec
from .training import TrainConfig

_BOOLS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _coerce(text: str, annotation: str, key: str):
    # annotations arrive as strings (postponed evaluation), e.g. "int | None"
    text = text.strip()
    optional = "None" in annotation
    if optional and text.lower() in ("", "none"):
        return None
    try:
        if annotation.startswith("tuple"):
            items = [t.strip() for t in text.split(",") if t.strip()]
            return tuple(int(t) for t in items) if "int" in annotation else tuple(items)
        if annotation.startswith("bool"):
            return _BOOLS[text.lower()]
        if annotation.startswith("int"):
            return int(text)
        if annotation.startswith("float"):
            return float(text)
    except (ValueError, KeyError):
        raise ConfigError(f"{key}: cannot read {text!r} as {annotation}") from None
    return text


def build_dataclass(cls, values: dict[str, str], section: str):
    """Instantiate ``cls`` from string values, typed by its field annotations."""
    hints = {f.name: str(f.type) for f in dataclasses.fields(cls)}
    unknown = set(values) - set(hints)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in values.items()}
    obj = cls(**kwargs)
    obj.validate()
    return obj


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    def to_dict(self) -> dict[str, Any]:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(), "synth": self.synth.to_dict()}

    def digest(self) -> str:
        return config_digest(self.to_dict())


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "synth": SynthSpec}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{source}: unknown sections {sorted(unknown)}")
    built = {name: build_dataclass(cls, dict(parser[name]) if parser.has_section(name) else {}, name)
             for name, cls in _SECTIONS.items()}
    return RunConfig(**built)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(), str(path))


def format_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config`."""
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(map(str, v))
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{k} = {'none' if v is None else v}")
        lines.append("")
    return "\n".join(lines)


def config_digest(obj: Any) -> str:
    """sha256 of the canonical JSON form; independent of key order."""
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_digest: str
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_time_s: float = 0.0
    started_at: float = field(default_factory=time.time)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


