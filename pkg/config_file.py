"""
Reader and writer for run configuration files.

    # comment
    [model]
    arch = small
    base_channels = 32,64
    [train]
    lr = 0.005

Every key must exist in the matching defaults dict of config.py; the
default's type decides how the value is parsed.
"""

import logging
from dataclasses import dataclass, field

from config import DATA_CONFIG, MODEL_CONFIG, TRAIN_CONFIG
from datasets import DataConfig
from errors import ConfigError
from models import ModelSpec
from optim import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = {
    'model': MODEL_CONFIG,
    'train': TRAIN_CONFIG,
    'data': DATA_CONFIG,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def sections(self):
        """Flat key -> value dicts per section, in the defaults' key order"""
        model = self.model.to_dict()
        model['complex'] = model.pop('complex_valued')
        values = {'model': model, 'train': self.train.to_dict(), 'data': self.data.to_dict()}
        return {name: {key: values[name][key] for key in defaults} for name, defaults in SECTIONS.items()}


def parse_value(text, default, where):
    """Parse `text` to the type of `default`; bool is checked before int"""
    text = text.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ('true', 'false'):
                raise ValueError(f"expected true or false, got '{text}'")
            return lowered == 'true'
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            return [int(item) for item in text.split(',') if item.strip()]
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e
    return text


def format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (list, tuple)):
        return ','.join(str(int(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text, source='<config>'):
    """Config text -> RunConfig; unknown sections and keys are rejected with their line number"""
    values = {name: dict(defaults) for name, defaults in SECTIONS.items()}
    seen = set()
    section = None
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{number}"
        if line.startswith('[') and line.endswith(']'):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if section is None:
            raise ConfigError(f"{where}: '{line}' appears before any [section]")
        if '=' not in line:
            raise ConfigError(f"{where}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in SECTIONS[section]:
            raise ConfigError(f"{where}: unknown key '{key}' in [{section}]")
        if (section, key) in seen:
            raise ConfigError(f"{where}: duplicate key '{key}' in [{section}]")
        seen.add((section, key))
        values[section][key] = parse_value(value, SECTIONS[section][key], f"{where} ({key})")
    return RunConfig(
        model=ModelSpec.from_config(values['model']),
        train=TrainConfig(**values['train']),
        data=DataConfig(**values['data']),
    )


def serialize_config(run_config):
    lines = []
    for name, values in run_config.sections().items():
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {format_value(value)}" for key, value in values.items())
        lines.append('')
    return '\n'.join(lines)


def load_config(path):
    try:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    run_config = parse_config(text, path)
    logger.debug(f"loaded config {path}")
    return run_config


def save_config(run_config, path):
    with open(path, 'w', encoding='utf-8') as f:
        f.write(serialize_config(run_config))
