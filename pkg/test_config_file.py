#!/usr/bin/env python3
"""
Tests for the run configuration format.
"""
import glob
import os

import pytest

from config_file import RunConfig, load_config, parse_config, parse_value, save_config, serialize_config
from errors import ConfigError
from models import ModelSpec
from optim import TrainConfig

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs')


def test_defaults_when_sections_are_empty():
    run = parse_config('[model]\n[train]\n[data]\n')
    assert run == RunConfig()


def test_values_are_typed_by_defaults():
    run = parse_config("""
# a comment line
[model]
arch = resnete      # trailing comment
complex = false
base_channels = 16, 32 ,64
t_clip = 0.5
[train]
epochs = 3
milestones = 2
""")
    assert run.model.arch == 'resnete'
    assert run.model.complex_valued is False
    assert run.model.base_channels == (16, 32, 64)
    assert run.model.t_clip == 0.5
    assert run.train.epochs == 3
    assert run.train.milestones == (2,)


def test_round_trip(tmp_path):
    run = RunConfig(model=ModelSpec(arch='nin', base_channels=(8,) * 8, norm='cbn', full_precision_blocks=(0, 3)),
                    train=TrainConfig(lr=0.001, milestones=(4, 9), prefetch=2))
    path = tmp_path / 'run.cfg'
    save_config(run, str(path))
    assert load_config(str(path)) == run
    assert parse_config(serialize_config(run)) == run


def test_unknown_key_names_the_line():
    with pytest.raises(ConfigError, match=r'run\.cfg:3: unknown key .widht.'):
        parse_config('[model]\narch = small\nwidht = 3\n', 'run.cfg')


def test_structural_errors():
    with pytest.raises(ConfigError, match='unknown section'):
        parse_config('[optimizer]\n')
    with pytest.raises(ConfigError, match='before any'):
        parse_config('arch = small\n')
    with pytest.raises(ConfigError, match='duplicate'):
        parse_config('[train]\nepochs = 1\nepochs = 2\n')
    with pytest.raises(ConfigError, match='key = value'):
        parse_config('[train]\nepochs\n')


def test_value_errors():
    with pytest.raises(ConfigError, match='epochs'):
        parse_config('[train]\nepochs = five\n')
    with pytest.raises(ConfigError, match='true or false'):
        parse_config('[model]\ncomplex = yes\n')
    # values that parse but fail validation
    with pytest.raises(ConfigError):
        parse_config('[model]\nnorm = groupnorm\n')
    with pytest.raises(ConfigError):
        parse_config('[train]\nlr = -1\n')


def test_parse_value_checks_bool_before_int():
    assert parse_value('true', True, 'x') is True
    assert parse_value('7', 3, 'x') == 7
    assert parse_value('1,2', [], 'x') == [1, 2]
    assert parse_value('', [], 'x') == []
    assert parse_value(' mnist ', 'cifar10', 'x') == 'mnist'


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match='cannot read'):
        load_config(str(tmp_path / 'absent.cfg'))


@pytest.mark.parametrize('path', sorted(glob.glob(os.path.join(CONFIG_DIR, '*.cfg'))))
def test_shipped_configs_parse(path):
    run = load_config(path)
    assert run.model.arch in ('small', 'nin')
