"""
Empirical Fisher approximation of a layer Hessian.

    F = kappa * I + (1/N) * sum_n g_n g_n^T

Dense mode materializes F (D x D); streaming mode keeps only the N x D
per-sample gradients and evaluates products through ``G @ v``. Both modes
answer the same questions to within rounding.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from pruning.errors import PreconditionError, ShapeError

DENSE_CAP = 4096
DEFAULT_KAPPA = 1e-4


@dataclass(frozen=True)
class FisherBlock:
    layer_id: str
    d: int
    mode: str
    kappa: float
    n: int
    grads: np.ndarray
    dense: Optional[np.ndarray] = None

    def project(self, v: np.ndarray) -> np.ndarray:
        """Per-sample projections ``G @ v`` (length N)."""
        return self.grads @ v

    def matrix(self) -> np.ndarray:
        """Explicit D x D matrix (built on demand in streaming mode)."""
        if self.dense is not None:
            return self.dense
        return self.kappa * np.eye(self.d) + (self.grads.T @ self.grads) / self.n


def build_fisher(per_sample_grads: np.ndarray, kappa: float = DEFAULT_KAPPA, layer_id: str = '',
                 dense_cap: int = DENSE_CAP, mode: Optional[str] = None) -> FisherBlock:
    """Fisher block from an N x D gradient stash; dense when D <= dense_cap."""
    grads = np.asarray(per_sample_grads, dtype=np.float64)
    if grads.ndim != 2 or grads.shape[0] < 1:
        raise PreconditionError(f"{layer_id or 'fisher'}: need a non-empty N x D gradient set, got {grads.shape}")
    if kappa < 0:
        raise PreconditionError(f"kappa must be nonnegative, got {kappa}")
    n, d = grads.shape
    mode = mode or ('dense' if d <= dense_cap else 'streaming')
    if mode not in ('dense', 'streaming'):
        raise PreconditionError(f"unknown Fisher mode {mode!r}")
    dense = None
    if mode == 'dense':
        dense = kappa * np.eye(d) + (grads.T @ grads) / n
        dense = 0.5 * (dense + dense.T)
    return FisherBlock(layer_id, d, mode, float(kappa), n, grads, dense)


def _check_len(f: FisherBlock, v: np.ndarray, name: str):
    if v.shape != (f.d,):
        raise ShapeError(f"{f.layer_id or 'fisher'}: {name} has shape {v.shape}, expected ({f.d},)")


def quad_form(f: FisherBlock, v: np.ndarray) -> float:
    """v^T F v = kappa * |v|^2 + mean_n (g_n^T v)^2."""
    v = np.asarray(v, dtype=np.float64)
    _check_len(f, v, "v")
    if f.mode == 'dense':
        return float(max(v @ f.dense @ v, 0.0))
    proj = f.project(v)
    return float(f.kappa * (v @ v) + (proj @ proj) / f.n)


def cross_form(f: FisherBlock, u: np.ndarray, v: np.ndarray, support: Optional[np.ndarray] = None,
               u_proj: Optional[np.ndarray] = None) -> float:
    """u^T F v touching only the columns in ``support``.

    ``v`` may be given full length (entries outside ``support`` are ignored)
    or as the values on ``support`` only. ``u_proj`` is an optional cached
    ``G @ u`` that keeps a call at O(N * |support|).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_len(f, u, "u")
    if support is None:
        _check_len(f, v, "v")
        support = np.flatnonzero(v)
        v_s = v[support]
    else:
        support = np.asarray(support, dtype=np.int64)
        if v.shape == (f.d,):
            v_s = v[support]
        elif v.shape == support.shape:
            v_s = v
        else:
            raise ShapeError(f"{f.layer_id or 'fisher'}: v has shape {v.shape}; expected ({f.d},) or {support.shape}")
    if f.mode == 'dense':
        return float(u @ (f.dense[:, support] @ v_s))
    if u_proj is None:
        u_proj = f.project(u)
    return float(f.kappa * (u[support] @ v_s) + (u_proj @ (f.grads[:, support] @ v_s)) / f.n)
