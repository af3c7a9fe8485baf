"""
Run configuration: a TOML file with [backbone], [adapter], [train] and
[data] sections. Flags override file values; the merged result is validated
before anything runs.
"""

from __future__ import annotations

import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adapters import METHODS, AdapterDims
from .backbone import BackboneConfig
from .errors import AdapterError, BackboneConfigError, ConfigError
from .fileio import PathLike, dumps_stable
from .training import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = ('backbone', 'adapter', 'train', 'data')


@dataclass
class AdapterConfig:
    method: str = 'lt-prompt'
    l: Optional[int] = None
    p_len: Optional[int] = None
    pooling_mode: str = 'weights'
    readout: str = 'last'

    def options(self) -> Dict[str, Any]:
        """Keyword arguments for AdapterDims.for_backbone."""
        return {'p_len': self.p_len, 'pooling_mode': self.pooling_mode, 'readout': self.readout}


@dataclass
class DataConfig:
    dir: Optional[str] = None
    text_column: str = 'sentence'
    label_column: str = 'label'
    split: str = 'val'


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> 'RunConfig':
        try:
            self.backbone.validate()
        except BackboneConfigError as e:
            raise ConfigError(str(e)) from e
        if self.adapter.method not in METHODS:
            raise ConfigError(f"adapter.method must be one of {', '.join(METHODS)}, got '{self.adapter.method}'")
        if self.adapter.l is not None and self.adapter.l < 1:
            raise ConfigError(f"adapter.l must be positive, got {self.adapter.l}")
        try:
            AdapterDims.for_backbone(self.backbone, l=self.adapter.l or 1, K=2,
                                     **self.adapter.options()).validate(self.adapter.method)
        except AdapterError as e:
            raise ConfigError(str(e)) from e
        self.train = replace(self.train, method=self.adapter.method).validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            'backbone': self.backbone.to_dict(),
            'adapter': asdict(self.adapter),
            'train': self.train.to_dict(),
            'data': asdict(self.data),
        }

    def echo(self):
        logger.info(f"[CONFIG] effective configuration:\n{dumps_stable(self.to_dict()).rstrip()}")


def _section(cls, name: str, values: Dict[str, Any]):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"[{name}]: {e}") from e


def from_dict(data: Dict[str, Any]) -> RunConfig:
    unknown = sorted(set(data) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    return RunConfig(
        backbone=_section(BackboneConfig, 'backbone', data.get('backbone', {})),
        adapter=_section(AdapterConfig, 'adapter', data.get('adapter', {})),
        train=_section(TrainConfig, 'train', data.get('train', {})),
        data=_section(DataConfig, 'data', data.get('data', {})),
    )


def load_config(path: Optional[PathLike] = None) -> RunConfig:
    """Read a TOML run config; no path means all defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML ({e})") from e
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: Dict[str, Any]) -> RunConfig:
    """
    Apply 'section.key' -> value overrides; None values are skipped so
    unset flags leave the file value in place.
    """
    sections = {name: getattr(cfg, name) for name in SECTIONS}
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, _, key = dotted.partition('.')
        if section not in sections or key not in {f.name for f in fields(sections[section])}:
            raise ConfigError(f"unknown config key '{dotted}'")
        sections[section] = replace(sections[section], **{key: value})
    return RunConfig(**sections)
