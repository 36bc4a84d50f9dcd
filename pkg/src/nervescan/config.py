"""Flat ``section.key = value`` run configuration.

Every stage config lives under its own section::

    seed = 42
    phantom.num_frames = 50
    detector.stride = 8
    tracker.T = 3

Unknown keys and malformed values are rejected with their line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .consistency import TrackerConfig
from .contour import SnakeParams
from .detector import DetectorConfig
from .errors import InvalidInputError
from .nn import TrainConfig
from .phantom import PhantomConfig


class ConfigError(InvalidInputError):
    pass


@dataclass
class PatchConfig:
    """Training patch sampling."""

    neg_per_frame: int = 4
    pos_per_frame: int = 5
    pos_shift: int = 12

    def validate(self):
        if self.neg_per_frame < 0:
            raise InvalidInputError("neg_per_frame must be >= 0", "neg_per_frame")
        if self.pos_per_frame < 1:
            raise InvalidInputError("pos_per_frame must be >= 1", "pos_per_frame")
        if self.pos_shift < 0:
            raise InvalidInputError("pos_shift must be >= 0", "pos_shift")


# seeds are derived from the top-level ``seed`` and are not settable per section
_DERIVED = {("phantom", "rng_seed"), ("train", "rng_seed")}


@dataclass
class RunConfig:
    seed: int = 42
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    patches: PatchConfig = field(default_factory=PatchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    snake: SnakeParams = field(default_factory=SnakeParams)

    SECTIONS = ("phantom", "patches", "train", "detector", "tracker", "snake")

    def seeds(self):
        """Independent integer seeds for phantom, patch sampling and training."""
        phantom, patches, train = np.random.SeedSequence(self.seed).generate_state(3)
        return int(phantom), int(patches), int(train)

    def apply_seed(self):
        phantom, _, train = self.seeds()
        self.phantom.rng_seed = phantom
        self.train.rng_seed = train

    def validate(self, origins=None):
        origins = origins or {}
        for name in self.SECTIONS:
            try:
                getattr(self, name).validate()
            except InvalidInputError as exc:
                key = f"{name}.{exc.field}" if exc.field else name
                where = origins.get(key, "default")
                raise ConfigError(f"{key} ({where}): {exc}", key) from None


def known_keys():
    keys = {"seed": int}
    defaults = RunConfig()
    for name in RunConfig.SECTIONS:
        for f in dataclasses.fields(getattr(defaults, name)):
            if (name, f.name) not in _DERIVED:
                keys[f"{name}.{f.name}"] = type(getattr(getattr(defaults, name), f.name))
    return keys


def _convert(kind, text):
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(text)
    if kind is int:
        return int(text, 10)
    value = kind(text)
    if kind is float and not np.isfinite(value):
        raise ValueError(text)
    return value


def _assign(cfg, key, text, where):
    keys = known_keys()
    if key not in keys:
        raise ConfigError(f"{where}: unknown key {key!r}", key)
    try:
        value = _convert(keys[key], text)
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {keys[key].__name__}, got {text!r}", key) from None
    if key == "seed":
        cfg.seed = value
    else:
        section, name = key.split(".", 1)
        setattr(getattr(cfg, section), name, value)


def parse_config(text, source="<config>", overrides=()):
    """Build a validated RunConfig from file text plus ``key=value`` overrides (which win)."""
    cfg = RunConfig()
    origins = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        _assign(cfg, key, value, where)
        origins[key] = f"line {lineno}"
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        _assign(cfg, key, value, "command line")
        origins[key] = "command line"
    cfg.validate(origins)
    cfg.apply_seed()
    return cfg


def load_config(path=None, overrides=()):
    if path is None:
        return parse_config("", overrides=overrides)
    with open(path) as f:
        return parse_config(f.read(), path, overrides)


def default_config_text():
    """Every key with its default value, one per line."""
    defaults = RunConfig()
    lines = [f"seed = {defaults.seed}"]
    for key in sorted(k for k in known_keys() if k != "seed"):
        section, name = key.split(".", 1)
        lines.append(f"{key} = {getattr(getattr(defaults, section), name)}")
    return "\n".join(lines) + "\n"
