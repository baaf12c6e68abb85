#!/usr/bin/env python3
"""
Run configuration for blockprune

Values are resolved in order: command-line flag, JSON config file,
environment (``BLOCKPRUNE_OUTPUT_DIR``), dataclass default.
"""

import json
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from pruning.errors import PreconditionError
from pruning.model import ToyViTConfig
from pruning.tensor import BlockShape

STREAMS = ('init', 'data', 'train', 'calib', 'finetune', 'audit', 'bench')


@dataclass
class RunConfig:
    model: Union[Dict[str, Any], str] = field(default_factory=dict)
    block_shape: str = '4x4'
    grid_size: int = 20
    flops_target: float = 0.5
    beta: float = 0.0
    ablation_beta: float = 1.0
    kappa: float = 1e-4
    calib_size: int = 256
    dense_cap: int = 4096
    loss: str = 'ce'
    train_epochs: int = 40
    train_lr: float = 0.01
    finetune_epochs: int = 20
    finetune_lr: float = 0.01
    momentum: float = 0.9
    grad_clip: float = 1.0
    batch_size: int = 32
    samples_per_class: int = 100
    test_samples_per_class: int = 50
    frozen_layers: List[str] = field(default_factory=lambda: ['head'])
    batch_granularity: int = 1
    audit_pairs: int = 5
    audit_trials: int = 100
    bench_reps: int = 20
    bench_warmup: int = 3
    sweep_shapes: List[str] = field(default_factory=lambda: ['2x2', '4x4', '8x8'])
    plot: bool = False
    save_grad_stash: bool = False
    seed: int = 0
    output_dir: str = field(default_factory=lambda: os.environ.get('BLOCKPRUNE_OUTPUT_DIR', 'runs'))
    config_dir: Optional[str] = None

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        data: Dict[str, Any] = {}
        config_dir = None
        if path:
            p = Path(path)
            if not p.exists():
                raise PreconditionError(f"config file {path} does not exist")
            try:
                data = json.loads(p.read_text(encoding='utf-8'))
            except json.JSONDecodeError as exc:
                raise PreconditionError(f"config file {path} is not valid JSON: {exc}") from exc
            config_dir = str(p.parent)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise PreconditionError(f"unknown config field(s): {', '.join(unknown)}")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        data.setdefault('config_dir', config_dir)
        config = cls(**data)
        config.validate()
        return config

    def validate(self):
        if not 0.0 < self.flops_target <= 1.0:
            raise PreconditionError(f"flops_target must lie in (0, 1], got {self.flops_target}")
        if self.grid_size < 1:
            raise PreconditionError(f"grid_size must be at least 1, got {self.grid_size}")
        if self.kappa < 0:
            raise PreconditionError(f"kappa must be nonnegative, got {self.kappa}")
        if self.beta < 0 or self.ablation_beta < 0:
            raise PreconditionError("beta values must be nonnegative")
        if self.calib_size < 1 or self.batch_size < 1:
            raise PreconditionError("calib_size and batch_size must be at least 1")
        if self.grad_clip < 0:
            raise PreconditionError(f"grad_clip must be nonnegative, got {self.grad_clip}")
        if self.loss not in ('ce', 'l2'):
            raise PreconditionError(f"loss must be 'ce' or 'l2', got {self.loss!r}")
        BlockShape.parse(self.block_shape)
        for text in self.sweep_shapes:
            BlockShape.parse(text)
        self.model_config()

    @property
    def shape(self) -> BlockShape:
        return BlockShape.parse(self.block_shape)

    def model_config(self) -> ToyViTConfig:
        """Inline model settings or the JSON file they point to (relative to the config file)"""
        model = self.model
        if isinstance(model, str):
            p = Path(model)
            if not p.is_absolute() and self.config_dir and not p.exists():
                p = Path(self.config_dir) / p
            if not p.exists():
                raise PreconditionError(f"model config {model} does not exist")
            model = json.loads(p.read_text(encoding='utf-8'))
        try:
            return ToyViTConfig.from_dict(dict(model))
        except TypeError as exc:
            raise PreconditionError(f"bad model config: {exc}") from exc

    def rng(self, stream: str) -> np.random.Generator:
        """Independent generator for a named stage, derived from the one seed"""
        if stream not in STREAMS:
            raise PreconditionError(f"unknown random stream {stream!r}")
        return np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(stream.encode())]))

    def stream_seed(self, stream: str) -> int:
        return int(self.rng(stream).integers(2 ** 31))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('config_dir')
        return data
