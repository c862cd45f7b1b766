#!/usr/bin/env python3
#
# Experiment configuration: one YAML tree mapped onto nested dataclasses.

from __future__ import annotations

import dataclasses
import logging
import os
import types
import typing
from dataclasses import dataclass, field
from typing import Any, Optional, Union

import yaml

from .cohesion import SamplingConfig
from .model import ModelSpec
from .trainer import OptimConfig

logger = logging.getLogger('cohesion_groups.config')

CONFIG_NAME = 'config.yaml'
DATA_SOURCES = ('synthetic', 'cifar10')


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    classes: int = 10
    dim: int = 8
    per_class: int = 200
    test_per_class: int = 60
    separation: float = 6.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.classes < 2 or self.dim < 1 or self.per_class < 1 or self.test_per_class < 1:
            raise ValueError('synthetic data needs classes >= 2 and positive dim and class sizes')
        if not self.separation > 0:
            raise ValueError('separation must be positive')


@dataclass(frozen=True)
class DataConfig:
    source: str = 'synthetic'
    # directory holding (or receiving) the CIFAR-10 binary batches
    path: Optional[str] = None
    download: bool = False
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    subset_seed: int = 0
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self) -> None:
        if self.source not in DATA_SOURCES:
            raise ValueError(f'source must be one of {DATA_SOURCES}, got {self.source!r}')
        if self.source == 'cifar10' and not self.path:
            raise ValueError('the cifar10 source needs data.path')
        for name in ('train_subset', 'test_subset'):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValueError(f'{name} must be positive')


@dataclass(frozen=True)
class SplitConfig:
    compact_size: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        if self.compact_size < 1:
            raise ValueError('compact_size must be positive')


@dataclass(frozen=True)
class ModelConfig:
    kind: str = 'mlp'
    hidden: tuple[int, ...] = (256, 256)
    channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3

    def to_spec(self, input_dim: int, classes: int,
                image_shape: Optional[tuple[int, int, int]] = None) -> ModelSpec:
        return ModelSpec(self.kind, input_dim, classes, hidden=self.hidden, channels=self.channels,
                         kernel_size=self.kernel_size, image_shape=image_shape if self.kind == 'cnn-small' else None)


@dataclass(frozen=True)
class GroupConfig:
    enabled: bool = True
    threshold: float = 1.0
    min_support: int = 20
    method: str = 'greedy'

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f'threshold {self.threshold} outside [0, 1]')
        if self.min_support < 0:
            raise ValueError('min_support must be non-negative')
        if self.method not in ('greedy', 'exhaustive'):
            raise ValueError(f'unknown group method {self.method!r}')


@dataclass(frozen=True)
class ReportConfig:
    include_predictions: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    groups: GroupConfig = field(default_factory=GroupConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    # None: physical core count
    threads: Optional[int] = None
    out_dir: str = 'out'


def _is_dataclass_type(hint: Any) -> bool:
    return isinstance(hint, type) and dataclasses.is_dataclass(hint)


def _coerce(hint: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(hint)
    if origin is Union or (hasattr(types, 'UnionType') and origin is getattr(types, 'UnionType')):
        options = typing.get_args(hint)
        if value is None and type(None) in options:
            return None
        inner = [option for option in options if option is not type(None)]
        return _coerce(inner[0], value, where)
    if _is_dataclass_type(hint):
        if not isinstance(value, dict):
            raise ConfigError(f'{where}: expected a mapping, got {type(value).__name__}')
        return _build(hint, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f'{where}: expected a list, got {type(value).__name__}')
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], item, f'{where}[{k}]') for k, item in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f'{where}: expected {len(args)} items, got {len(value)}')
        return tuple(_coerce(arg, item, f'{where}[{k}]') for k, (arg, item) in enumerate(zip(args, value)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f'{where}: expected true/false, got {value!r}')
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f'{where}: expected an integer, got {value!r}')
        return value
    if hint is float:
        # YAML reads 1e-3 without a dot as a string
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f'{where}: expected a number, got {value!r}')
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f'{where}: expected a string, got {value!r}')
        return value
    raise ConfigError(f'{where}: unsupported setting type {hint!r}')


def _build(cls: type, values: dict[str, Any], where: str) -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f'{where}: unknown keys {", ".join(map(str, unknown))}')
    kwargs = {name: _coerce(hints[name], value, f'{where}.{name}') for name, value in values.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f'{where}: {exc}') from exc


def from_dict(values: Optional[dict[str, Any]], where: str = 'config') -> ExperimentConfig:
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f'{where}: top level must be a mapping')
    return _build(ExperimentConfig, values, where)


def load_config(path: Optional[str]) -> ExperimentConfig:
    '''Reads a YAML config; None gives the defaults'''
    if path is None:
        return ExperimentConfig()
    if not os.path.isfile(path):
        raise ConfigError(f'{path}: config file not found')
    with open(path) as infile:
        try:
            values = yaml.safe_load(infile)
        except yaml.YAMLError as exc:
            raise ConfigError(f'{path}: {exc}') from exc
    logger.info('loaded config %s', path)
    return from_dict(values, path)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def to_dict(config: ExperimentConfig) -> dict[str, Any]:
    return _plain(dataclasses.asdict(config))


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=True, default_flow_style=False)


def write_config(config: ExperimentConfig, out_dir: str) -> str:
    path = os.path.join(out_dir, CONFIG_NAME)
    with open(path, 'w') as outfile:
        outfile.write(dump_config(config))
    return path


def apply_seed_override(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    '''Replaces every seed in the tree'''
    if seed < 0:
        raise ConfigError(f'seed override must be non-negative, got {seed}')
    data = dataclasses.replace(config.data, subset_seed=seed,
                               synthetic=dataclasses.replace(config.data.synthetic, seed=seed))
    return dataclasses.replace(
        config,
        data=data,
        split=dataclasses.replace(config.split, seed=seed),
        optim=dataclasses.replace(config.optim, seed=seed),
        sampling=dataclasses.replace(config.sampling, seed=seed),
    )


def apply_overrides(config: ExperimentConfig, out_dir: Optional[str] = None, threads: Optional[int] = None,
                    seed: Optional[int] = None) -> ExperimentConfig:
    if out_dir is not None:
        config = dataclasses.replace(config, out_dir=out_dir)
    if threads is not None:
        config = dataclasses.replace(config, threads=threads)
    if seed is not None:
        config = apply_seed_override(config, seed)
    return config


def validate(config: ExperimentConfig) -> ExperimentConfig:
    """Checks what the dataclasses cannot check on their own.

    All seeds must be explicit non-negative integers and referenced paths
    must exist (a CIFAR-10 directory may be missing only when it is to be
    downloaded).
    """
    seeds = {
        'data.subset_seed': config.data.subset_seed,
        'data.synthetic.seed': config.data.synthetic.seed,
        'split.seed': config.split.seed,
        'optim.seed': config.optim.seed,
        'sampling.seed': config.sampling.seed,
    }
    for where, seed in seeds.items():
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError(f'{where}: seed must be a non-negative integer, got {seed!r}')
    if config.threads is not None and config.threads < 1:
        raise ConfigError(f'threads must be positive, got {config.threads}')
    if config.data.source == 'cifar10' and not config.data.download:
        if not config.data.path or not os.path.isdir(config.data.path):
            raise ConfigError(f'data.path: directory not found: {config.data.path}')
    return config
