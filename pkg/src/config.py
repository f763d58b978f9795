"""
INI configuration: [network], [training], [data] and [inference] sections resolved
with CLI flag > config file > built-in default precedence
"""
import configparser
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import torch

from errors import InvalidConfig
from inference import InferenceConfig
from network import NetworkConfig
from patching import PatchSpec, as_triple
from training import TrainConfig
from volume_io import DEFAULT_LABEL_MAPPING, format_label_mapping, parse_label_mapping

logger = logging.getLogger(__name__)

THREADS_ENV = 'HDAN_THREADS'

SOURCE_DEFAULT = 'default'
SOURCE_FILE = 'file'
SOURCE_FLAG = 'flag'


def _parse_bool(text: str) -> bool:
    value = configparser.ConfigParser.BOOLEAN_STATES.get(text.strip().lower())
    if value is None:
        raise ValueError(f"not a boolean: {text!r}")
    return value


def _parse_optional_int(text: str) -> Optional[int]:
    return None if text.strip().lower() in ('', 'none') else int(text)


def _parse_triple(text: str):
    return as_triple([int(v) for v in text.split(',')])


_NETWORK_KEYS: Dict[str, Callable[[str], Any]] = {
    f.name: (_parse_bool if f.type in (bool, 'bool') else int) for f in fields(NetworkConfig)
}

_TRAINING_KEYS: Dict[str, Callable[[str], Any]] = {
    'initial_lr': float,
    'lr_drop_interval': int,
    'lr_drop_factor': float,
    'weight_decay': float,
    'max_epochs': int,
    'batch_size': int,
    'patches_per_volume_per_epoch': int,
    'seed': int,
    'optimizer': str.strip,
    'max_steps': _parse_optional_int,
}

_DATA_KEYS: Dict[str, Callable[[str], Any]] = {
    'patch_size': _parse_triple,
    'stride': _parse_triple,
    'label_mapping': parse_label_mapping,
}

_INFERENCE_KEYS: Dict[str, Callable[[str], Any]] = {
    'tie_break': str.strip,
    'trace_attention': _parse_bool,
    'attention_stage': int,
    'workers': int,
}

SECTIONS: Dict[str, Dict[str, Callable[[str], Any]]] = {
    'network': _NETWORK_KEYS,
    'training': _TRAINING_KEYS,
    'data': _DATA_KEYS,
    'inference': _INFERENCE_KEYS,
}


@dataclass
class ResolvedConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    label_mapping: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_LABEL_MAPPING))
    sources: Dict[str, str] = field(default_factory=dict)

    @property
    def explicit_label_mapping(self) -> Optional[Dict[int, int]]:
        """The mapping when a file or flag set it; None lets label sidecars decide"""
        return self.label_mapping if 'data.label_mapping' in self.sources else None

    def effective(self) -> Dict[str, Any]:
        """Flat `section.key -> value` view of every setting"""
        values = {f'network.{k}': v for k, v in self.network.to_dict().items()}
        training = self.training.to_dict()
        values.update({f'training.{k}': training[k] for k in _TRAINING_KEYS})
        values['data.patch_size'] = self.training.patch_size
        values['data.stride'] = self.training.stride
        values['data.label_mapping'] = format_label_mapping(self.label_mapping)
        values.update({f'inference.{k}': getattr(self.inference, k) for k in _INFERENCE_KEYS})
        return values

    def log_effective(self) -> None:
        for key, value in self.effective().items():
            logger.info("config %s = %s (%s)", key, value, self.sources.get(key, SOURCE_DEFAULT))


def read_config_file(path) -> Dict[str, Dict[str, Any]]:
    """Parse and type-check an INI file; unknown sections or keys are rejected"""
    path = Path(path)
    if not path.is_file():
        raise InvalidConfig(f"Config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding='utf-8')
    except configparser.Error as e:
        raise InvalidConfig(f"Cannot parse config file {path}: {e}") from e

    values: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise InvalidConfig(f"{path}: unknown section [{section}]; expected {sorted(SECTIONS)}")
        keys = SECTIONS[section]
        values[section] = {}
        for key, text in parser.items(section):
            if key not in keys:
                raise InvalidConfig(f"{path}: unknown key {key!r} in [{section}]")
            try:
                values[section][key] = keys[key](text)
            except (ValueError, InvalidConfig) as e:
                raise InvalidConfig(f"{path}: bad value for [{section}] {key}: {e}") from e
    return values


def _merge(file_values: Dict[str, Dict[str, Any]], overrides: Dict[str, Dict[str, Any]]):
    merged: Dict[str, Dict[str, Any]] = {s: {} for s in SECTIONS}
    sources: Dict[str, str] = {}
    for origin, layer in ((SOURCE_FILE, file_values), (SOURCE_FLAG, overrides)):
        for section, items in layer.items():
            for key, value in items.items():
                if value is None:
                    continue
                merged[section][key] = value
                sources[f'{section}.{key}'] = origin
    return merged, sources


def resolve(config_path=None, overrides: Optional[Dict[str, Dict[str, Any]]] = None,
            base_network: Optional[NetworkConfig] = None) -> ResolvedConfig:
    """
    Combine built-in defaults, an optional config file and CLI overrides.

    Override values of None are ignored so unset flags fall through.
    """
    file_values = read_config_file(config_path) if config_path is not None else {}
    merged, sources = _merge(file_values, overrides or {})

    network = replace(base_network or NetworkConfig(), **merged['network'])
    data = merged['data']
    training = TrainConfig(**merged['training'],
                           **{k: data[k] for k in ('patch_size', 'stride') if k in data})
    inference = InferenceConfig(patch_spec=PatchSpec(training.patch_size, training.stride), **merged['inference'])
    label_mapping = data.get('label_mapping', dict(DEFAULT_LABEL_MAPPING))

    network.validate()
    training.validate()
    inference.validate()
    return ResolvedConfig(network=network, training=training, inference=inference,
                          label_mapping=label_mapping, sources=sources)


def resolve_threads(flag: Optional[int] = None) -> Optional[int]:
    """--threads, else $HDAN_THREADS, else the torch default (None)"""
    if flag is None:
        env = os.environ.get(THREADS_ENV, '').strip()
        if not env:
            return None
        try:
            flag = int(env)
        except ValueError as e:
            raise InvalidConfig(f"{THREADS_ENV} must be an integer, got {env!r}") from e
    if flag < 1:
        raise InvalidConfig(f"Thread count must be >= 1, got {flag}")
    return flag


def apply_threads(threads: Optional[int]) -> None:
    if threads is not None:
        torch.set_num_threads(threads)
        logger.info("Using %d threads", threads)
