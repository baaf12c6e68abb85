"""
Dense matrix arithmetic and block masks.

A Matrix is a 2-D numpy array (float32 unless a caller asks for float64,
e.g. finite-difference checks). Blocks tile a matrix in row-major order;
flat block index ``b = block_row * block_cols + block_col``.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from pruning.errors import NonFiniteError, PreconditionError, ShapeError

DTYPE = np.float32


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate that ``a`` is 2-D; non-float input is cast to float32."""
    arr = np.asarray(a)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.dtype.kind != 'f':
        arr = arr.astype(DTYPE)
    return arr


def ensure_finite(a: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{what} produced non-finite values")
    return a


@dataclass(frozen=True)
class BlockShape:
    b_r: int
    b_c: int

    def __post_init__(self):
        if int(self.b_r) < 1 or int(self.b_c) < 1:
            raise PreconditionError(f"block shape must be positive, got {self.b_r}x{self.b_c}")

    @classmethod
    def parse(cls, text: str) -> "BlockShape":
        """Parse ``"BRxBC"`` (e.g. ``"4x4"``)."""
        try:
            b_r, b_c = (int(part) for part in str(text).lower().split('x'))
        except ValueError as exc:
            raise PreconditionError(f"block shape must look like 4x4, got {text!r}") from exc
        return cls(b_r, b_c)

    def __str__(self) -> str:
        return f"{self.b_r}x{self.b_c}"

    @property
    def area(self) -> int:
        return self.b_r * self.b_c

    def grid(self, rows: int, cols: int, name: str = "matrix") -> Tuple[int, int]:
        """Number of block rows/cols for a ``rows x cols`` matrix."""
        if rows % self.b_r or cols % self.b_c:
            raise ShapeError(
                f"{name} of shape {rows}x{cols} is not divisible by block shape {self}"
            )
        return rows // self.b_r, cols // self.b_c

    def divides(self, rows: int, cols: int) -> bool:
        return rows % self.b_r == 0 and cols % self.b_c == 0


@dataclass
class BlockMask:
    """Keep (True) / prune (False) decision per block."""
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ShapeError(f"block mask must be 2-D, got shape {self.bits.shape}")

    @classmethod
    def ones(cls, block_rows: int, block_cols: int) -> "BlockMask":
        return cls(np.ones((block_rows, block_cols), dtype=bool))

    @classmethod
    def from_pruned(cls, block_rows: int, block_cols: int, pruned_flat) -> "BlockMask":
        bits = np.ones(block_rows * block_cols, dtype=bool)
        bits[np.asarray(pruned_flat, dtype=np.int64)] = False
        return cls(bits.reshape(block_rows, block_cols))

    @classmethod
    def from_matrix(cls, w: np.ndarray, shape: BlockShape) -> "BlockMask":
        """Recover a mask from zero blocks of an already-pruned matrix."""
        w = as_matrix(w)
        br, bc = shape.grid(*w.shape)
        tiles = w.reshape(br, shape.b_r, bc, shape.b_c)
        return cls(np.any(tiles != 0, axis=(1, 3)))

    @property
    def block_rows(self) -> int:
        return self.bits.shape[0]

    @property
    def block_cols(self) -> int:
        return self.bits.shape[1]

    @property
    def num_blocks(self) -> int:
        return self.bits.size

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    @property
    def density(self) -> float:
        return self.popcount / self.num_blocks

    def expand(self, shape: BlockShape) -> np.ndarray:
        """Elementwise boolean mask of the full matrix."""
        return np.repeat(np.repeat(self.bits, shape.b_r, axis=0), shape.b_c, axis=1)

    def check_against(self, w: np.ndarray, shape: BlockShape, name: str = "matrix"):
        grid = shape.grid(*w.shape, name=name)
        if grid != self.bits.shape:
            raise ShapeError(
                f"mask of {self.block_rows}x{self.block_cols} blocks does not match "
                f"{name} {w.shape[0]}x{w.shape[1]} with block shape {shape}"
            )


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact dense product with a fixed k-loop accumulation order.

    out[i, j] accumulates ``a[i, k] * b[k, j]`` for k = 0, 1, ... in that
    order, each product and sum rounded in the operand dtype, so the result
    equals a naive triple loop bit for bit.
    """
    a = as_matrix(a, "lhs")
    b = as_matrix(b, "rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}")
    dtype = np.result_type(a.dtype, b.dtype)
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    tmp = np.empty_like(out)
    for k in range(a.shape[1]):
        np.multiply(a[:, k, None], b[None, k, :], out=tmp, dtype=dtype)
        out += tmp
    return ensure_finite(out, "matmul")


def apply_mask(w: np.ndarray, mask: BlockMask, shape: BlockShape) -> np.ndarray:
    """Zero every entry of a pruned block; kept entries are copied unchanged."""
    w = as_matrix(w, "weight")
    mask.check_against(w, shape, "weight")
    return np.where(mask.expand(shape), w, np.zeros((), dtype=w.dtype))


def block_view(w: np.ndarray, shape: BlockShape) -> np.ndarray:
    """``(block_rows, block_cols, b_r, b_c)`` view of the tiles of ``w``."""
    br, bc = shape.grid(*w.shape)
    return w.reshape(br, shape.b_r, bc, shape.b_c).transpose(0, 2, 1, 3)


def block_entry_indices(rows: int, cols: int, shape: BlockShape, blocks) -> np.ndarray:
    """Row-major flat entry indices covered by the given flat block indices."""
    _, bc = shape.grid(rows, cols)
    blocks = np.asarray(blocks, dtype=np.int64)
    if blocks.size == 0:
        return np.empty(0, dtype=np.int64)
    r0 = (blocks // bc) * shape.b_r
    c0 = (blocks % bc) * shape.b_c
    dr, dc = np.meshgrid(np.arange(shape.b_r), np.arange(shape.b_c), indexing='ij')
    idx = (r0[:, None, None] + dr[None]) * cols + (c0[:, None, None] + dc[None])
    return idx.reshape(-1)
