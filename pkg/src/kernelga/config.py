"""Run configuration: INI-style ``.cfg`` files with ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .ga import GaConfig
from .genome import NetworkTemplate
from .optim import RMSPropConfig
from .trainer import TrainConfig

DATA_SOURCES = ("synthetic", "idx", "dir", "cache")


@dataclass
class DataConfig:
    source: str = "synthetic"
    train_images: str = ""
    train_labels: str = ""
    image_dir: str = ""
    cache: str = ""
    validation_size: int = 60
    split_seed: int = 0
    preprocess: bool = True
    filters: tuple = ("median", "gaussian")
    polarity: str = "auto"
    synthetic_per_class: int = 100
    synthetic_seed: int = 0

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ConfigError(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        self.filters = tuple(self.filters)
        if self.validation_size < 1:
            raise ConfigError("data.validation_size must be >= 1")


@dataclass
class RunSection:
    seed: int = 0
    output_dir: str = "runs/default"
    jobs: int = 1

    def __post_init__(self):
        if self.jobs < 1:
            raise ConfigError("run.jobs must be >= 1")


@dataclass
class RunConfig:
    ga: GaConfig = field(default_factory=GaConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    optim: RMSPropConfig = field(default_factory=RMSPropConfig)
    template: NetworkTemplate = field(default_factory=NetworkTemplate)
    data: DataConfig = field(default_factory=DataConfig)
    run: RunSection = field(default_factory=RunSection)

    def resolved(self) -> "RunConfig":
        """Propagate cross-section values (seed, optimizer) into the nested configs."""
        ga = dataclasses.replace(self.ga, master_seed=self.run.seed)
        train = dataclasses.replace(self.train, optim=self.optim)
        return dataclasses.replace(self, ga=ga, train=train)

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            section.pop("optim", None)
            section.pop("master_seed", None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def fingerprint(self) -> str:
        """Hash of everything that affects results (output location and job count excluded)."""
        d = self.to_dict()
        d["run"] = {"seed": d["run"]["seed"]}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


SECTIONS = {
    "ga": GaConfig,
    "train": TrainConfig,
    "optim": RMSPropConfig,
    "template": NetworkTemplate,
    "data": DataConfig,
    "run": RunSection,
}

# desk-scale values applied on top of the full-size defaults
TINY_PROFILE = {
    "template.channel_plan": "8,16,32",
    "template.fc_width": "64",
    "template.num_classes": "3",
    "ga.population_size": "6",
    "ga.max_generations": "3",
    "train.epochs": "5",
    "train.batch_size": "50",
}


def _field_types(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls) if f.init and f.name not in ("optim", "master_seed")}


def _coerce(value, default, key):
    if isinstance(value, str):
        text = value.strip()
    else:
        return value
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(t) for t in items)
            return tuple(items)
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r} for {key}") from exc
    return text


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return None


def apply_overrides(values: dict, overrides: dict) -> dict:
    """Merge ``{"section.key": raw}`` overrides into ``{section: {key: raw}}``; unknown keys raise."""
    for dotted, raw in overrides.items():
        if "." not in dotted:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if key not in _field_types(SECTIONS[section]):
            raise ConfigError(f"unknown config key {dotted!r}")
        values.setdefault(section, {})[key] = raw
    return values


def build(values: dict) -> RunConfig:
    sections = {}
    for name, cls in SECTIONS.items():
        fields = _field_types(cls)
        kwargs = {}
        for key, raw in values.get(name, {}).items():
            if key not in fields:
                raise ConfigError(f"unknown config key {name}.{key}")
            kwargs[key] = _coerce(raw, _default_of(fields[key]), f"{name}.{key}")
        try:
            sections[name] = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(**sections).resolved()


def read_cfg(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            apply_overrides(values, {f"{section}.{key}": raw})
    return values


def load(path=None, tiny=False, overrides=None) -> RunConfig:
    """Defaults, then the tiny profile, then the file, then the overrides."""
    values = {}
    if tiny:
        apply_overrides(values, TINY_PROFILE)
    if path is not None:
        for section, items in read_cfg(path).items():
            values.setdefault(section, {}).update(items)
    apply_overrides(values, overrides or {})
    return build(values)


def from_dict(d: dict) -> RunConfig:
    values = {}
    for section, items in d.items():
        for key, v in items.items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            apply_overrides(values, {f"{section}.{key}": v if isinstance(v, str) else json.dumps(v)})
    return build(values)
