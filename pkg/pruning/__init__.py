"""
blockprune - Pruning Package

Block-structured, hardware-aware pruning for vision transformers: block
scoring, second-order distortion curves, FLOPs and power cost models and
the layerwise ratio allocator.
"""

from .errors import (
    BlockPruneError,
    ContainerFormatError,
    InfeasibleConstraintError,
    NonFiniteError,
    PreconditionError,
    ShapeError,
    StaleCacheError,
    TrainingDivergedError,
)
from .tensor import BlockMask, BlockShape
from .bsr import BsrMatrix, MacCounter, bsr_from_masked, bsr_matmul
from .model import ParamSet, ToyViTConfig
from .curves import DistortionCurve, LayerState
from .power import CostReport, LayerCost
from .allocator import AllocationPlan, solve

__version__ = "1.0.0"

__all__ = [
    "BlockPruneError",
    "ContainerFormatError",
    "InfeasibleConstraintError",
    "NonFiniteError",
    "PreconditionError",
    "ShapeError",
    "StaleCacheError",
    "TrainingDivergedError",
    "BlockMask",
    "BlockShape",
    "BsrMatrix",
    "MacCounter",
    "bsr_from_masked",
    "bsr_matmul",
    "ParamSet",
    "ToyViTConfig",
    "DistortionCurve",
    "LayerState",
    "CostReport",
    "LayerCost",
    "AllocationPlan",
    "solve",
]
