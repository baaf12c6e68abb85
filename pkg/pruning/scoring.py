"""
First-order Taylor block scores and rank-based block masks.

The prune order of a layer is fixed once from its block scores; every
pruning ratio removes a prefix of that order, so masks are nested along
the ratio grid.
"""

import math
from dataclasses import dataclass

import numpy as np

from pruning.errors import PreconditionError, ShapeError
from pruning.tensor import BlockMask, BlockShape, as_matrix, block_view


@dataclass
class BlockScore:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"block scores must be 2-D, got shape {self.values.shape}")
        if np.any(self.values < 0) or not np.isfinite(self.values).all():
            raise PreconditionError("block scores must be finite and nonnegative")

    @property
    def block_rows(self) -> int:
        return self.values.shape[0]

    @property
    def block_cols(self) -> int:
        return self.values.shape[1]

    @property
    def num_blocks(self) -> int:
        return self.values.size


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def pruned_block_count(alpha: float, num_blocks: int) -> int:
    """Blocks removed at ratio ``alpha``: round(alpha * num_blocks), half away from zero."""
    if not 0.0 <= alpha <= 1.0:
        raise PreconditionError(f"pruning ratio must lie in [0, 1], got {alpha}")
    return min(num_blocks, round_half_away(alpha * num_blocks))


def taylor_score(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Elementwise |w * g|."""
    w = as_matrix(w, "weight")
    g = as_matrix(g, "gradient")
    if w.shape != g.shape:
        raise ShapeError(f"weight {w.shape} and gradient {g.shape} differ in shape")
    return np.abs(w * g)


def block_pool(s: np.ndarray, shape: BlockShape) -> BlockScore:
    """Mean of each ``b_r x b_c`` tile."""
    s = as_matrix(s, "score")
    shape.grid(*s.shape, name="score")
    return BlockScore(block_view(s.astype(np.float64), shape).mean(axis=(2, 3)))


def prune_order(scores: BlockScore) -> np.ndarray:
    """Flat block indices sorted by (score, index) ascending."""
    return np.argsort(scores.values.reshape(-1), kind='stable')


def mask_at_ratio(scores: BlockScore, alpha: float) -> BlockMask:
    """Prune the ``round(alpha * blocks)`` lowest-scoring blocks."""
    pruned = prune_order(scores)[:pruned_block_count(alpha, scores.num_blocks)]
    return BlockMask.from_pruned(scores.block_rows, scores.block_cols, pruned)


def mask_from_order(order: np.ndarray, block_rows: int, block_cols: int, alpha: float) -> BlockMask:
    """Mask for ``alpha`` from a precomputed prune order."""
    return BlockMask.from_pruned(block_rows, block_cols, order[:pruned_block_count(alpha, len(order))])


def layer_scores(w: np.ndarray, mean_grad: np.ndarray, shape: BlockShape) -> BlockScore:
    """Block scores of a weight from its calibration-mean gradient."""
    return block_pool(taylor_score(w, mean_grad), shape)
