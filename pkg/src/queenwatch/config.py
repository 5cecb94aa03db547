"""Run configuration: TOML file sections merged with command-line flags (flags win)."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError
from .evaluate import DEFAULT_SUBSETS, ENERGY_PRESETS
from .features import parse_mask
from .gbdt import TrainConfig
from .ingest import FIELDS, SynthConfig
from .quantize import QuantSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TRANSPORTS = ("loopback", "replay", "serial")


@dataclass
class RunConfig:
    data: Optional[str] = None
    schema: dict = field(default_factory=dict)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantSpec = field(default_factory=QuantSpec)
    subsets: tuple = DEFAULT_SUBSETS
    n_seeds: int = 10
    seed: int = 0
    test_fraction: float = 0.2
    valid_fraction: float = 0.2
    cv_folds: int = 5
    energy_preset: str = "paper-48mhz"
    transport: str = "loopback"
    port: Optional[str] = None
    baudrate: int = 115200
    parity_floor: float = 0.995

    def validate(self) -> "RunConfig":
        try:
            self.synth.validate()
            self.train.validate()
            for s in self.subsets:
                parse_mask(s)
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(str(exc)) from None
        unknown = set(self.schema) - set(FIELDS)
        if unknown:
            raise ConfigError(f"unknown schema fields: {sorted(unknown)}")
        if self.n_seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if not 0 < self.test_fraction < 1 or not 0 < self.valid_fraction < 1:
            raise ConfigError("split fractions must lie in (0, 1)")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if self.energy_preset not in ENERGY_PRESETS:
            raise ConfigError(f"unknown energy preset {self.energy_preset!r}")
        if self.transport not in TRANSPORTS:
            raise ConfigError(f"unknown transport {self.transport!r}")
        if not 0 <= self.parity_floor <= 1:
            raise ConfigError("parity floor must lie in [0, 1]")
        return self


# [section] -> RunConfig attribute per key; nested sections map onto their own dataclass
_NESTED = {"synth": SynthConfig, "train": TrainConfig, "quant": QuantSpec}
_SECTIONS = {
    "data": {"path": "data", "schema": "schema"},
    "eval": {"subsets": "subsets", "seeds": "n_seeds", "seed": "seed", "test_fraction": "test_fraction",
             "valid_fraction": "valid_fraction", "cv_folds": "cv_folds", "energy_preset": "energy_preset"},
    "serve": {"transport": "transport", "port": "port", "baudrate": "baudrate"},
    "parity": {"floor": "parity_floor"},
}


def _replace_nested(obj, section, values):
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    if "channel_separation" in values:
        values = dict(values, channel_separation=tuple(values["channel_separation"]))
    try:
        return dataclasses.replace(obj, **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_mapping(doc: dict, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    for section, values in doc.items():
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key {section!r} must be a [section]")
        if section in _NESTED:
            setattr(cfg, section, _replace_nested(getattr(cfg, section), section, values))
        elif section in _SECTIONS:
            allowed = _SECTIONS[section]
            unknown = set(values) - set(allowed)
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
            for k, v in values.items():
                if k == "subsets":
                    v = tuple(v)
                setattr(cfg, allowed[k], v)
        else:
            raise ConfigError(f"unknown section [{section}]")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return from_mapping(doc)


def parse_schema(text: str) -> dict:
    """'label=colony_state,timestamp=ts' -> mapping of field to column name."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, col = part.partition("=")
        if not sep or not col.strip():
            raise ConfigError(f"schema entry {part!r} is not field=column")
        out[key.strip()] = col.strip()
    return out
