"""Experiment configuration: INI-style ``key = value`` sections.

Sections are ``[experiment]``, ``[data]``, ``[model]`` and ``[train]``.
Values are layered: profile defaults, then the config file, then CLI flags.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from .data import PAPER_PROPORTIONS, GeneratorSpec
from .federation import FedConfig
from .model import PAPER_PROFILE, TOY_PROFILE, ModelConfig


class ConfigError(ValueError):
    """Validation failure; the message starts with the offending field path."""


@dataclass(frozen=True)
class DataSection:
    path: str = ""
    n_samples: int = 22672
    class_proportions: tuple = PAPER_PROPORTIONS
    noise_std: float = 0.01
    frames_raw: int = 60
    alpha: float = 0.5
    clients: int = 56
    split: tuple = (0.6, 0.2, 0.2)
    confidence_threshold: float = 0.3


@dataclass(frozen=True)
class TrainSection:
    rounds: int = 100
    local_epochs: int = 3
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    warmup_rounds: int = 30
    selection_policy: str = "budget"
    budget_fraction: float = 0.59
    importance_top_fraction: float = 0.5
    aggregation: str = "mean"
    participation: float = 1.0
    shuffle: bool = True
    checkpoint_every: int = 0
    centralized_epochs: int = 30


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    output: str = "runs"
    profile: str = "paper"


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = PAPER_PROFILE
    train: TrainSection = field(default_factory=TrainSection)

    def generator_spec(self) -> GeneratorSpec:
        d = self.data
        return GeneratorSpec(tuple(d.class_proportions), d.noise_std, d.frames_raw,
                             self.experiment.seed)

    def fed_config(self, policy: str | None = None) -> FedConfig:
        t = self.train
        return FedConfig(
            rounds=t.rounds, clients=self.data.clients, local_epochs=t.local_epochs,
            batch_size=t.batch_size, lr=t.lr, optimizer=t.optimizer,
            warmup_rounds=t.warmup_rounds, selection_policy=policy or t.selection_policy,
            budget_fraction=t.budget_fraction, importance_top_fraction=t.importance_top_fraction,
            aggregation=t.aggregation, participation=t.participation, shuffle=t.shuffle,
            confidence_threshold=self.data.confidence_threshold,
            checkpoint_every=t.checkpoint_every, seed=self.experiment.seed)


SECTIONS = ("experiment", "data", "model", "train")

PROFILES = {
    "paper": ExperimentConfig(),
    "toy": ExperimentConfig(
        ExperimentSection(profile="toy"),
        DataSection(n_samples=200, clients=2, frames_raw=20),
        TOY_PROFILE,
        TrainSection(rounds=1, warmup_rounds=0, local_epochs=1, centralized_epochs=1),
    ),
}


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _validate(cfg: ExperimentConfig) -> ExperimentConfig:
    for section in SECTIONS:
        obj = getattr(cfg, section)
        try:
            # re-running the constructor triggers the dataclass validators
            replace(obj)
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    d = cfg.data
    checks = [
        ("data.n_samples", d.n_samples >= 1, "must be >= 1"),
        ("data.clients", d.clients >= 1, "must be >= 1"),
        ("data.alpha", d.alpha > 0, "must be > 0"),
        ("data.split", len(d.split) == 3 and abs(sum(d.split) - 1) <= 1e-9, "three ratios summing to 1"),
        ("data.confidence_threshold", 0 <= d.confidence_threshold <= 1, "must be in [0, 1]"),
        ("data.frames_raw", d.frames_raw >= 1, "must be >= 1"),
        ("train.centralized_epochs", cfg.train.centralized_epochs >= 0, "must be >= 0"),
        ("experiment.profile", cfg.experiment.profile in PROFILES, f"one of {sorted(PROFILES)}"),
    ]
    for path, ok, msg in checks:
        if not ok:
            raise ConfigError(f"{path}: {msg}")
    try:
        cfg.generator_spec()
    except ValueError as exc:
        raise ConfigError(f"data.class_proportions: {exc}") from None
    try:
        cfg.fed_config()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    return cfg


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    if base is None:
        profile = parser.get("experiment", "profile", fallback="paper").strip()
        if profile not in PROFILES:
            raise ConfigError(f"experiment.profile: unknown profile {profile!r}")
        base = PROFILES[profile]
    updated = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        obj = getattr(base, section)
        known = {f.name: getattr(obj, f.name) for f in fields(obj)}
        changes = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{section}.{key}: unknown key")
            changes[key] = _coerce(raw, known[key], f"{section}.{key}")
        try:
            updated[section] = replace(obj, **changes)
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from None
    return _validate(replace(base, **updated))


def dumps(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def load(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), base)


def with_overrides(cfg: ExperimentConfig, **experiment) -> ExperimentConfig:
    experiment = {k: v for k, v in experiment.items() if v is not None}
    return _validate(replace(cfg, experiment=replace(cfg.experiment, **experiment)))
