"""
Block compressed sparse row (BSR) weights and the block-sparse GEMM.

``bsr_matmul(a, b)`` computes ``a @ b`` for a dense activation ``a``
(M x K) and a BSR weight ``b`` (K x N logical). Work is organised per
block-row of ``b``: the matching column slab of ``a`` is multiplied with
every kept tile of that block-row, so pruned tiles cost nothing.
"""

import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from pruning.errors import PreconditionError, ShapeError
from pruning.model import LinearExecutor
from pruning.tensor import BlockMask, BlockShape, as_matrix, block_view, ensure_finite
from utils.logger import get_logger, log_performance

logger = get_logger('bsr')

BENCH_COLUMNS = ['density', 'wall_time_ns', 'macs']


@dataclass
class MacCounter:
    """Multiply-accumulate tally filled by the GEMM kernels."""
    macs: int = 0

    def add(self, n: int):
        self.macs += int(n)

    def reset(self):
        self.macs = 0


@dataclass
class BsrMatrix:
    block_shape: BlockShape
    block_rows: int
    block_cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    blocks: np.ndarray

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int64)
        if self.row_ptr.shape != (self.block_rows + 1,):
            raise ShapeError(f"row_ptr must have {self.block_rows + 1} entries, got {self.row_ptr.shape}")
        if np.any(np.diff(self.row_ptr) < 0) or self.row_ptr[0] != 0:
            raise PreconditionError("row_ptr must start at 0 and be nondecreasing")
        if self.row_ptr[-1] != len(self.col_idx) or len(self.col_idx) != len(self.blocks):
            raise PreconditionError(
                f"row_ptr ends at {self.row_ptr[-1]} but there are {len(self.col_idx)} "
                f"column indices and {len(self.blocks)} tiles"
            )

    @property
    def shape(self):
        return (self.block_rows * self.block_shape.b_r, self.block_cols * self.block_shape.b_c)

    @property
    def nnz_blocks(self) -> int:
        return len(self.col_idx)

    @property
    def density(self) -> float:
        return self.nnz_blocks / (self.block_rows * self.block_cols)

    def mask(self) -> BlockMask:
        bits = np.zeros((self.block_rows, self.block_cols), dtype=bool)
        for r in range(self.block_rows):
            bits[r, self.col_idx[self.row_ptr[r]:self.row_ptr[r + 1]]] = True
        return BlockMask(bits)

    def to_dense(self) -> np.ndarray:
        s = self.block_shape
        out = np.zeros(self.shape, dtype=self.blocks.dtype if len(self.blocks) else np.float32)
        tiles = block_view(out, s)
        for r in range(self.block_rows):
            for idx in range(self.row_ptr[r], self.row_ptr[r + 1]):
                tiles[r, self.col_idx[idx]] = self.blocks[idx]
        return out


def bsr_from_masked(w: np.ndarray, mask: BlockMask, shape: BlockShape) -> BsrMatrix:
    """Pack the kept tiles of ``w`` (as selected by ``mask``) into BSR form."""
    w = as_matrix(w, "weight")
    mask.check_against(w, shape, "weight")
    tiles = block_view(w, shape)
    rows, cols = np.nonzero(mask.bits)  # row-major, so col_idx is sorted per row
    row_ptr = np.zeros(mask.block_rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=mask.block_rows), out=row_ptr[1:])
    blocks = np.ascontiguousarray(tiles[rows, cols]) if len(rows) else np.zeros((0, shape.b_r, shape.b_c), dtype=w.dtype)
    return BsrMatrix(shape, mask.block_rows, mask.block_cols, row_ptr, cols, blocks)


def bsr_matmul(a: np.ndarray, b: BsrMatrix, counter: Optional[MacCounter] = None) -> np.ndarray:
    """Dense x block-sparse product; pruned tiles are skipped entirely."""
    a = as_matrix(a, "lhs")
    k_dim, n_dim = b.shape
    if a.shape[1] != k_dim:
        raise ShapeError(f"bsr_matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} @ {k_dim}x{n_dim}")
    s = b.block_shape
    m = a.shape[0]
    dtype = np.result_type(a.dtype, b.blocks.dtype)
    out = np.zeros((m, n_dim), dtype=dtype)
    out_tiles = out.reshape(m, b.block_cols, s.b_c)
    for r in range(b.block_rows):
        start, end = b.row_ptr[r], b.row_ptr[r + 1]
        if start == end:
            continue
        slab = a[:, r * s.b_r:(r + 1) * s.b_r]
        # (b_r, kept * b_c) panel of this block-row's tiles, in col_idx order
        panel = b.blocks[start:end].transpose(1, 0, 2).reshape(s.b_r, -1)
        partial = np.matmul(slab, panel).reshape(m, end - start, s.b_c)
        out_tiles[:, b.col_idx[start:end], :] += partial
        if counter is not None:
            counter.add(m * (end - start) * s.area)
    return ensure_finite(out, "bsr_matmul")


def random_block_mask(block_rows: int, block_cols: int, density: float, rng: np.random.Generator) -> BlockMask:
    """Mask keeping exactly ``round(density * blocks)`` uniformly chosen blocks."""
    total = block_rows * block_cols
    keep = int(np.floor(density * total + 0.5))
    kept = rng.choice(total, size=keep, replace=False)
    bits = np.zeros(total, dtype=bool)
    bits[kept] = True
    return BlockMask(bits.reshape(block_rows, block_cols))


def time_call(fn, reps: int, warmup: int) -> int:
    """Median wall time of ``fn()`` in nanoseconds."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return int(np.median(samples))


def bench_bsr(m: int, n: int, k: int, shape: BlockShape, densities: Iterable[float],
              reps: int = 20, warmup: int = 3, seed: int = 0) -> pd.DataFrame:
    """Time bsr_matmul of an ``m x k`` activation with a ``k x n`` weight per density.

    Returns a table with columns ``density, wall_time_ns, macs``.
    """
    densities = [float(d) for d in densities]
    if any(not 0.0 < d <= 1.0 for d in densities):
        raise PreconditionError(f"densities must lie in (0, 1], got {densities}")
    if reps < 20 or warmup < 3:
        raise PreconditionError("bench_bsr needs at least 20 repetitions and 3 warm-up runs")
    br, bc = shape.grid(k, n, "weight")
    if m < 1:
        raise PreconditionError("m must be positive")

    rng = np.random.default_rng(seed)
    a = rng.standard_normal((m, k)).astype(np.float32)
    w = rng.standard_normal((k, n)).astype(np.float32)

    rows: List[dict] = []
    for density in densities:
        mask = random_block_mask(br, bc, density, rng)
        b = bsr_from_masked(w, mask, shape)
        counter = MacCounter()
        bsr_matmul(a, b, counter)
        wall = time_call(lambda: bsr_matmul(a, b), reps, warmup)
        rows.append({'density': density, 'wall_time_ns': wall, 'macs': counter.macs})
        logger.info(f"bench m={m} n={n} k={k} blocks={shape} density={density}: {wall} ns, {counter.macs} MACs")
        log_performance('bsr_matmul', wall / 1e9, {'density': density, 'm': m, 'n': n, 'k': k,
                                                   'block_shape': str(shape)})

    return pd.DataFrame(rows, columns=BENCH_COLUMNS)


class BsrExecutor(LinearExecutor):
    """Forward-pass executor that routes packed layers through bsr_matmul."""

    def __init__(self, weights: Dict[str, BsrMatrix], counter: Optional[MacCounter] = None):
        super().__init__(counter)
        self.weights = weights

    def linear(self, layer_id: str, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        packed = self.weights.get(layer_id)
        if packed is None:
            return super().linear(layer_id, x, w)
        if packed.shape != w.shape:
            raise ShapeError(f"{layer_id}: packed weight {packed.shape} does not match {w.shape}")
        return bsr_matmul(x, packed, self.counter)


def pack_params(weights: Dict[str, np.ndarray], shape: BlockShape) -> Dict[str, BsrMatrix]:
    """BSR form of every weight the block shape divides; masks come from zero blocks."""
    packed = {}
    for lid, w in weights.items():
        if not shape.divides(*w.shape):
            logger.debug(f"{lid}: {w.shape[0]}x{w.shape[1]} not divisible by {shape}, kept dense")
            continue
        packed[lid] = bsr_from_masked(w, BlockMask.from_matrix(w, shape), shape)
    return packed
