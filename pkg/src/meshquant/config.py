"""
Experiment configuration: one YAML document with a section per module, overridable from
the environment (``MESHQUANT__SECTION__KEY=value``) and the command line (``section.key=value``).
"""
import hashlib
import json
import logging
import os
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, fields, asdict, replace
from importlib import metadata
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .auxiliary import AuxConfig
from .datagen import DataConfig
from .model import MPNNConfig
from .train import TrainConfig

logger = logging.getLogger(__package__)

ENV_PREFIX = 'MESHQUANT__'


class ConfigError(ValueError):
    pass


@dataclass
class SweepPointConfig:
    name: str
    mode: str
    levels: tuple[int, ...]
    ratios: tuple[float, ...]

    def __post_init__(self):
        self.levels = tuple(int(b) for b in self.levels)
        self.ratios = tuple(float(r) for r in self.ratios)

    def to_dict(self) -> dict:
        return {'name': self.name, 'mode': self.mode, 'levels': list(self.levels), 'ratios': list(self.ratios)}


def default_grid() -> list[SweepPointConfig]:
    return [
        SweepPointConfig('int4', 'uniform', (4, 8), (1.0, 0.0)),
        SweepPointConfig('int8', 'uniform', (4, 8), (0.0, 1.0)),
        SweepPointConfig('targeted-25', 'targeted', (4, 8), (0.75, 0.25)),
        SweepPointConfig('targeted-50', 'targeted', (4, 8), (0.5, 0.5)),
        SweepPointConfig('targeted-75', 'targeted', (4, 8), (0.25, 0.75)),
        SweepPointConfig('random-50', 'random', (4, 8), (0.5, 0.5)),
    ]


@dataclass
class SweepConfig:
    points: list[SweepPointConfig] = field(default_factory=default_grid)
    seeds: tuple[int, ...] = (0, 1, 2)
    workers: int = 1
    plot: bool = False

    def __post_init__(self):
        self.points = [p if isinstance(p, SweepPointConfig) else SweepPointConfig(**p) for p in self.points]
        self.seeds = tuple(int(s) for s in self.seeds)

    def to_dict(self) -> dict:
        return {'points': [p.to_dict() for p in self.points], 'seeds': list(self.seeds),
                'workers': self.workers, 'plot': self.plot}


@dataclass
class PathsConfig:
    dataset: str = 'data/darcy.jsonl'
    output_dir: str = 'runs'

    @property
    def output(self) -> Path:
        return Path(self.output_dir)

    @property
    def registry(self) -> Path:
        return self.output / 'sweep.sqlite3'


SECTIONS = {
    'data': DataConfig,
    'model': MPNNConfig,
    'aux': AuxConfig,
    'train': TrainConfig,
    'sweep': SweepConfig,
    'paths': PathsConfig,
}


def _section_dict(value) -> dict:
    return value.to_dict() if hasattr(value, 'to_dict') else asdict(value)


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: MPNNConfig = field(default_factory=MPNNConfig)
    aux: AuxConfig = field(default_factory=AuxConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def validate(self, sweep: bool = False):
        """Check every section; failures are reported as ``ConfigError``."""
        checks = [('data', self.data), ('model', self.model), ('aux', self.aux), ('train', self.train)]
        for name, section in checks:
            try:
                section.validate()
            except ValueError as e:
                raise ConfigError(f"[{name}] {e}") from e
        if self.model.in_dim != 1 or self.model.pos_dim != 2:
            raise ConfigError("[model] the Darcy benchmark has in_dim=1 and pos_dim=2")
        try:
            replace(self.model, levels=self.train.levels).validate()
        except ValueError as e:
            raise ConfigError(f"[train] levels incompatible with the model: {e}") from e
        if sweep:
            self.validate_sweep()

    def validate_sweep(self):
        if not self.sweep.points:
            raise ConfigError("[sweep] the grid is empty")
        if not self.sweep.seeds:
            raise ConfigError("[sweep] no seeds given")
        if self.sweep.workers < 1:
            raise ConfigError(f"[sweep] workers must be at least 1, got {self.sweep.workers}")
        names = [p.name for p in self.sweep.points]
        if len(set(names)) != len(names):
            raise ConfigError(f"[sweep] duplicate point names in {names}")
        for point in self.sweep.points:
            try:
                self.point_train_config(point, self.sweep.seeds[0]).validate()
            except ValueError as e:
                raise ConfigError(f"[sweep] point '{point.name}': {e}") from e

    def point_train_config(self, point: SweepPointConfig, seed: int) -> TrainConfig:
        return replace(self.train, mode=point.mode, levels=point.levels, ratios=point.ratios, seed=seed)

    def run_hash(self, train: Optional[TrainConfig] = None) -> str:
        """Hash of everything that determines the outcome of one training run."""
        tree = self.to_dict()
        if train is not None:
            tree['train'] = train.to_dict()
        del tree['sweep'], tree['paths']['output_dir']
        canonical = json.dumps(tree, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def point_hash(self, point: SweepPointConfig, seed: int) -> str:
        return self.run_hash(self.point_train_config(point, seed))

    @classmethod
    def from_dict(cls, tree: Mapping) -> 'ExperimentConfig':
        return cls(**{name: _build_section(name, tree.get(name)) for name in SECTIONS})


def _build_section(name: str, values: Any):
    cls = SECTIONS[name]
    if values is None:
        values = {}
    if not isinstance(values, Mapping):
        raise ConfigError(f"section '{name}' must be a mapping, got {type(values).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{name}] {e}") from e


def _set_path(tree: dict, dotted: str, raw: str):
    section, _, key = dotted.partition('.')
    if not key or section not in SECTIONS:
        raise ConfigError(f"override '{dotted}' must look like <section>.<key> with section in {sorted(SECTIONS)}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse override value for '{dotted}': {e}") from e
    node = tree.setdefault(section, {}) or {}
    tree[section] = node
    *parents, leaf = key.split('.')
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = value


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> list[tuple[str, str]]:
    environ = os.environ if environ is None else environ
    out = []
    for name, value in sorted(environ.items()):
        if name.startswith(ENV_PREFIX):
            out.append(('.'.join(name[len(ENV_PREFIX):].lower().split('__')), value))
    return out


def parse_overrides(items: Iterable[str]) -> list[tuple[str, str]]:
    out = []
    for item in items:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(f"override '{item}' is not of the form section.key=value")
        out.append((key.strip(), value))
    return out


def load_config(path: Optional[Union[str, Path]] = None, overrides: Iterable[str] = (),
                environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Defaults, then the YAML file, then environment overrides, then command-line overrides."""
    tree: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file '{path}' does not exist")
        try:
            with open(path, encoding='utf-8') as f:
                tree = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse '{path}': {e}") from e
        if not isinstance(tree, dict):
            raise ConfigError(f"'{path}' must hold a mapping of sections")
    unknown = set(tree) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for key, value in env_overrides(environ) + parse_overrides(overrides):
        _set_path(tree, key, value)
    return ExperimentConfig.from_dict(tree)


def dump_config(config: ExperimentConfig, path: Union[str, Path]):
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=True)


def code_version() -> str:
    try:
        return metadata.version('meshquant')
    except metadata.PackageNotFoundError:
        return '0+unknown'
