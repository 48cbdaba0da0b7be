"""Experiment configuration files.

Configs are INI-style ``key = value`` sections parsed with :mod:`configparser`.
Every section maps onto a dataclass; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .losses import TverskyParams
from .synth import SynthConfig
from .unet import ModelConfig


class ConfigError(ValueError):
    pass


LOSS_MODES = ("tversky", "adaptive_tverskyce")


@dataclass(frozen=True)
class LossConfig:
    mode: str = "adaptive_tverskyce"
    alpha: float = 0.5
    beta: float = 0.5
    smooth: float = 1e-6

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ConfigError(f"loss.mode must be one of {LOSS_MODES}, got {self.mode!r}")

    @property
    def params(self) -> TverskyParams:
        return TverskyParams(self.alpha, self.beta, self.smooth)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.005
    batch_size: int = 10
    epochs: int = 150
    decay_factor: float = 0.5
    patience: int = 10
    floor_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("optim.batch_size and optim.epochs must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    dir: str = "data/synth"
    patch: int = 32
    patches_per_volume: int = 1
    window_lo: float = -100.0
    window_hi: float = 240.0


@dataclass(frozen=True)
class RunConfig:
    seed: int | None = None
    out: str = "runs/default"
    checkpoint_every: int = 0


@dataclass(frozen=True)
class GradcheckConfig:
    instances: int = 20
    max_extent: int = 6
    h_loss: float = 1e-5
    h_e2e: float = 1e-3
    tol_loss: float = 1e-4
    tol_e2e: float = 1e-3
    seed: int = 0


MODEL_KEYS = ("depth", "base_channels", "downsample_mode", "dilated_bottleneck", "bottleneck_dilations")


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    @property
    def seed(self) -> int:
        if self.run.seed is None:
            raise ConfigError("a seed is mandatory: set [run] seed or pass --seed")
        return self.run.seed

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, obj in self._sections():
            keys = MODEL_KEYS if section == "model" else [f.name for f in dataclasses.fields(obj)]
            parser[section] = {k: _format(getattr(obj, k)) for k in keys if getattr(obj, k) is not None}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def _sections(self):
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self)]


SECTION_TYPES = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(section, key, text, default):
    try:
        if isinstance(default, bool):
            low = text.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "yes", "1", "on")
        if isinstance(default, int) or (default is None and key == "seed"):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v.strip()) for v in text.split(",") if v.strip())
        return text.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def parse_config(text: str, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    built = {}
    for section in parser.sections():
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]; expected one of {sorted(SECTION_TYPES)}")
    for name, factory in SECTION_TYPES.items():
        default = factory()
        allowed = MODEL_KEYS if name == "model" else [f.name for f in dataclasses.fields(default)]
        values = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in allowed:
                    raise ConfigError(f"[{name}] unknown key {key!r}; allowed: {', '.join(allowed)}")
                values[key] = _convert(name, key, raw, getattr(default, key))
        if name == "run":
            if seed is not None:
                values["seed"] = seed
            if out is not None:
                values["out"] = out
        try:
            built[name] = dataclasses.replace(default, **values)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return ExperimentConfig(**built)


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), seed=seed, out=out)
