"""Experiment configuration as a versioned ``key = value`` text file.

Every field of :class:`ExperimentConfig` may be set in the file or through an
environment variable ``OPMARK_<FIELD>`` (upper case), which wins over the file.
Tuples are written comma separated.
"""
from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from ..detector import Hyperparameters
from ..markov import MODES, split_schema
from ..obfuscation import ObfuscationConfig

CONFIG_VERSION = 1
ENV_PREFIX = "OPMARK_"
CLASSIFIERS = {"rf": "random-forest", "gb": "gradient-boosted",
               "random-forest": "random-forest", "gradient-boosted": "gradient-boosted"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    schemas: tuple[str, ...] = ("MM", "ICA-MM", "GF", "MM+GF", "ICA-MM+GF")
    modes: tuple[str, ...] = MODES
    classifiers: tuple[str, ...] = ("random-forest", "gradient-boosted")
    runs: int = 50
    seed: int = 0
    train_fraction: float = 0.7
    vocab_cap: int = 128
    keep_fallthrough: bool = True
    ica_components: int = 34
    spectrum_k: int = 16
    aggregates: tuple[str, ...] = ("mean",)
    forest_trees: int = 100
    forest_depth: int = 12
    forest_max_features: str = "sqrt"
    boost_trees: int = 200
    boost_depth: int = 4
    learning_rate: float = 0.1
    min_samples_leaf: int = 1
    n_bins: int = 32
    dead_code_rate: float = 0.05
    substitution_rate: float = 0.3
    mixing_rate: float = 0.2
    cache_dir: str = ""

    def __post_init__(self):
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        for s in self.schemas:
            if ":" in s or "," in s:
                raise ConfigError(f"schema {s!r} should not name a mode; use 'modes'")
            try:
                split_schema(s)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r}")
        object.__setattr__(self, "classifiers", tuple(self._classifier(c) for c in self.classifiers))

    @staticmethod
    def _classifier(name: str) -> str:
        try:
            return CLASSIFIERS[name]
        except KeyError:
            raise ConfigError(f"unknown classifier {name!r}") from None

    def hyperparameters(self, kind: str) -> Hyperparameters:
        kind = self._classifier(kind)
        if kind == "random-forest":
            mf = self.forest_max_features
            return Hyperparameters.forest(n_trees=self.forest_trees, max_depth=self.forest_depth,
                                          max_features=mf if mf == "sqrt" else float(mf),
                                          min_samples_leaf=self.min_samples_leaf, n_bins=self.n_bins)
        return Hyperparameters.boosting(n_trees=self.boost_trees, max_depth=self.boost_depth,
                                        learning_rate=self.learning_rate,
                                        min_samples_leaf=self.min_samples_leaf, n_bins=self.n_bins)

    def obfuscation(self) -> ObfuscationConfig:
        return ObfuscationConfig(dead_code_rate=self.dead_code_rate, substitution_rate=self.substitution_rate,
                                 mixing_rate=self.mixing_rate)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"version = {CONFIG_VERSION}"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {', '.join(v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_HINTS = typing.get_type_hints(ExperimentConfig)


def _convert(name: str, raw: str):
    kind = _HINTS[name]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, environ: typing.Mapping[str, str] | None = None) -> ExperimentConfig:
    values: dict[str, str] = {}
    version = None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key == "version":
            version = raw
            continue
        if key not in _HINTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        values[key] = raw
    if version is None:
        raise ConfigError("config file lacks a 'version' line")
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"unsupported config version {version}")
    env = os.environ if environ is None else environ
    for key in _HINTS:
        if ENV_PREFIX + key.upper() in env:
            values[key] = env[ENV_PREFIX + key.upper()]
    return ExperimentConfig(**{k: _convert(k, v) for k, v in values.items()})


def load_config(path: str | Path | None = None, environ=None) -> ExperimentConfig:
    """Read a config file; with no path, start from defaults plus env overrides."""
    text = Path(path).read_text() if path else f"version = {CONFIG_VERSION}\n"
    return parse_config(text, environ)
