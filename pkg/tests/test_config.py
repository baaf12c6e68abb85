#!/usr/bin/env python3
"""
Tests for run configuration loading
"""

import json
import sys
from pathlib import Path

import pytest

parent_dir = Path(__file__).parent.parent
sys.path.insert(0, str(parent_dir))

from pruning.errors import PreconditionError
from pruning.model import ToyViTConfig
from pruning.tensor import BlockShape
from utils.config import RunConfig


def write_json(path, data):
    path.write_text(json.dumps(data), encoding='utf-8')
    return path


class TestRunConfig:
    """Defaults, files and overrides"""

    def test_defaults(self):
        config = RunConfig.load()
        assert config.shape == BlockShape(4, 4)
        assert config.grid_size == 20
        assert config.frozen_layers == ['head']
        assert config.train_lr == 0.01 and config.grad_clip == 1.0
        assert config.model_config() == ToyViTConfig()

    def test_file_and_overrides(self, tmp_path):
        path = write_json(tmp_path / 'run.json', {'flops_target': 0.4, 'block_shape': '2x2', 'seed': 3})
        config = RunConfig.load(str(path), {'flops_target': 0.7, 'seed': None})
        assert config.flops_target == 0.7
        assert config.seed == 3
        assert config.block_shape == '2x2'

    def test_unknown_field(self, tmp_path):
        path = write_json(tmp_path / 'run.json', {'flops_targett': 0.4})
        with pytest.raises(PreconditionError):
            RunConfig.load(str(path))

    def test_missing_and_malformed_file(self, tmp_path):
        with pytest.raises(PreconditionError):
            RunConfig.load(str(tmp_path / 'absent.json'))
        bad = tmp_path / 'bad.json'
        bad.write_text('{not json', encoding='utf-8')
        with pytest.raises(PreconditionError):
            RunConfig.load(str(bad))

    @pytest.mark.parametrize("overrides", [
        {'flops_target': 0.0}, {'flops_target': 1.5}, {'block_shape': '4by4'}, {'grid_size': 0},
        {'kappa': -1.0}, {'loss': 'hinge'}, {'sweep_shapes': ['2x2', 'x']}, {'grad_clip': -1.0},
    ])
    def test_invalid_values(self, overrides):
        with pytest.raises(PreconditionError):
            RunConfig.load(overrides=overrides)

    def test_model_path_relative_to_config(self, tmp_path):
        write_json(tmp_path / 'model.json', {'embed_dim': 16, 'num_heads': 4})
        path = write_json(tmp_path / 'run.json', {'model': 'model.json'})
        config = RunConfig.load(str(path))
        assert config.model_config() == ToyViTConfig(embed_dim=16, num_heads=4)

    def test_bad_model_config(self):
        with pytest.raises(PreconditionError):
            RunConfig.load(overrides={'model': {'embed_dims': 16}})

    def test_output_dir_from_environment(self, monkeypatch):
        monkeypatch.setenv('BLOCKPRUNE_OUTPUT_DIR', '/tmp/elsewhere')
        assert RunConfig.load().output_dir == '/tmp/elsewhere'


class TestSeedStreams:
    """Named random streams"""

    def test_streams_are_deterministic(self):
        a, b = RunConfig.load(overrides={'seed': 5}), RunConfig.load(overrides={'seed': 5})
        assert a.rng('calib').integers(1 << 30) == b.rng('calib').integers(1 << 30)

    def test_streams_are_independent(self):
        config = RunConfig.load()
        draws = {s: config.rng(s).standard_normal(4).tolist() for s in ('data', 'calib', 'audit')}
        assert len({tuple(v) for v in draws.values()}) == 3
        assert config.stream_seed('data') != RunConfig.load(overrides={'seed': 1}).stream_seed('data')

    def test_unknown_stream(self):
        with pytest.raises(PreconditionError):
            RunConfig.load().rng('nope')

    def test_to_dict_drops_config_dir(self):
        data = RunConfig.load().to_dict()
        assert 'config_dir' not in data
        assert data['block_shape'] == '4x4'
        assert data['flops_target'] == 0.5
