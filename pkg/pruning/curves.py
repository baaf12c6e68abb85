"""
Per-layer distortion curves on a uniform pruning-ratio grid.

For a layer with weight W, calibration-mean gradient g and Fisher F,

    delta(alpha) = g^T dW + 1/2 dW^T F dW,    dW = W_pruned(alpha) - W.

The incremental walk adds the blocks newly pruned at each grid step:

    delta_k = delta_{k-1} + g_s^T d + (1/2 d + dW_{k-1})^T F[:, s] d

where ``s`` is the support of the step and ``d = -W[s]``. Per-sample
projections ``G @ dW`` are carried along so streaming Fisher blocks never
revisit the full weight.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from pruning.errors import PreconditionError
from pruning.fisher import FisherBlock, cross_form, quad_form
from pruning.model import CalibBatch, ParamSet, forward, scalar_proxy
from pruning.scoring import BlockScore, layer_scores, prune_order, pruned_block_count
from pruning.tensor import BlockMask, BlockShape, apply_mask, block_entry_indices
from utils.logger import get_logger, log_performance

logger = get_logger('curves')

DEFAULT_GRID = 20
AUDIT_THRESHOLD = 0.1


@dataclass
class LayerState:
    """Everything the curve computations need about one prunable layer."""
    layer_id: str
    weight: np.ndarray
    shape: BlockShape
    mean_grad: np.ndarray
    fisher: FisherBlock
    order: np.ndarray = None

    def __post_init__(self):
        self.weight = np.asarray(self.weight)
        self.mean_grad = np.asarray(self.mean_grad, dtype=np.float64).reshape(-1)
        self.block_rows, self.block_cols = self.shape.grid(*self.weight.shape, name=self.layer_id)
        if self.mean_grad.size != self.weight.size or self.fisher.d != self.weight.size:
            raise PreconditionError(f"{self.layer_id}: gradient/Fisher dimension does not match weight")
        if self.order is None:
            self.order = prune_order(self.scores())

    @property
    def num_blocks(self) -> int:
        return self.block_rows * self.block_cols

    def scores(self) -> BlockScore:
        return layer_scores(self.weight, self.mean_grad.reshape(self.weight.shape), self.shape)

    def support(self, blocks) -> np.ndarray:
        return block_entry_indices(*self.weight.shape, self.shape, blocks)

    def mask(self, alpha: float) -> BlockMask:
        pruned = self.order[:pruned_block_count(alpha, self.num_blocks)]
        return BlockMask.from_pruned(self.block_rows, self.block_cols, pruned)

    def perturbation(self, alpha: float) -> np.ndarray:
        """Flattened dW = W_pruned(alpha) - W in float64."""
        w = self.weight.astype(np.float64)
        return (apply_mask(w, self.mask(alpha), self.shape) - w).reshape(-1)


@dataclass
class DistortionCurve:
    layer_id: str
    grid: np.ndarray
    delta: np.ndarray
    slope: np.ndarray = field(default=None)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.slope is None:
            self.slope = squared_slope(self.delta)

    @property
    def K(self) -> int:
        return len(self.grid) - 1

    @property
    def distortion(self) -> np.ndarray:
        """delta^2 at every grid point."""
        return self.delta ** 2

    def monotone_slope(self) -> np.ndarray:
        return monotonize(self.slope)

    def to_frame(self) -> pd.DataFrame:
        slope = np.append(self.slope, np.nan)
        return pd.DataFrame({'alpha': self.grid, 'delta': self.delta, 'slope': slope})


def ratio_grid(K: int) -> np.ndarray:
    if K < 1:
        raise PreconditionError(f"grid size must be at least 1, got {K}")
    return np.arange(K + 1, dtype=np.float64) / K


def squared_slope(delta: np.ndarray) -> np.ndarray:
    """Forward differences of delta^2 per unit ratio; entry k covers [alpha_k, alpha_k+1]."""
    K = len(delta) - 1
    return np.diff(np.asarray(delta, dtype=np.float64) ** 2) * K


def monotonize(slope: np.ndarray) -> np.ndarray:
    """Clamp to nonnegative, then make nondecreasing."""
    return np.maximum.accumulate(np.maximum(np.asarray(slope, dtype=np.float64), 0.0))


def delta_naive(layer: LayerState, alpha: float) -> float:
    """Second-order distortion at ``alpha`` recomputed from scratch."""
    dw = layer.perturbation(alpha)
    return float(layer.mean_grad @ dw + 0.5 * quad_form(layer.fisher, dw))


def delta_curve_incremental(layer: LayerState, K: int = DEFAULT_GRID) -> DistortionCurve:
    """delta on the grid {0, 1/K, ..., 1}, one newly pruned block set per step."""
    start = time.time()
    grid = ratio_grid(K)
    w = layer.weight.astype(np.float64).reshape(-1)
    f = layer.fisher
    streaming = f.mode == 'streaming'

    dw = np.zeros_like(w)
    dw_proj = np.zeros(f.n) if streaming else None
    delta = np.zeros(K + 1)
    done = 0
    for k in range(1, K + 1):
        upto = pruned_block_count(grid[k], layer.num_blocks)
        s = layer.support(layer.order[done:upto])
        done = upto
        if s.size == 0:
            delta[k] = delta[k - 1]
            continue
        d = -w[s]
        u = dw.copy()
        u[s] += 0.5 * d
        u_proj = None
        step_proj = None
        if streaming:
            step_proj = f.grads[:, s] @ d
            u_proj = dw_proj + 0.5 * step_proj
        delta[k] = delta[k - 1] + layer.mean_grad[s] @ d + cross_form(f, u, d, support=s, u_proj=u_proj)
        dw[s] = d
        if streaming:
            dw_proj += step_proj

    curve = DistortionCurve(layer.layer_id, grid, delta)
    log_performance('delta_curve_incremental', time.time() - start,
                    {'layer_id': layer.layer_id, 'K': K, 'd': int(w.size), 'mode': f.mode})
    return curve


def crossterm_terms(a_i: np.ndarray, b_i: np.ndarray, a_j: np.ndarray, b_j: np.ndarray) -> Dict[str, float]:
    """Normalized cross-layer statistics from per-trial first/second-order terms.

    ``a`` is g^T dW and ``b`` is 1/2 dW^T F dW for each trial. ``*_mean`` is
    the raw product expectation, the plain ratio is that expectation
    normalized by both second moments (identical inputs give 1) and
    ``*_centered`` is the correlation across trials.
    """
    def ratio(x, y, centered):
        if centered:
            x, y = x - x.mean(), y - y.mean()
        denom = np.sqrt((x @ x) * (y @ y))
        return float((x @ y) / denom) if denom > 0 else 0.0

    t_i, t_j = a_i + b_i, a_j + b_j
    out = {}
    for name, x, y in (('grad_grad', a_i, a_j), ('hess_grad', b_i, a_j),
                       ('grad_hess', a_i, b_j), ('hess_hess', b_i, b_j), ('total', t_i, t_j)):
        out[f'{name}_mean'] = float(np.mean(x * y))
        out[name] = ratio(x, y, False)
        out[f'{name}_centered'] = ratio(x, y, True)
    return out


def random_pruning(layer: LayerState, rng: np.random.Generator) -> np.ndarray:
    """dW for a uniformly random ratio and uniformly random block subset."""
    count = int(rng.integers(0, layer.num_blocks + 1))
    blocks = rng.choice(layer.num_blocks, size=count, replace=False)
    w = layer.weight.astype(np.float64).reshape(-1)
    dw = np.zeros_like(w)
    s = layer.support(blocks)
    dw[s] = -w[s]
    return dw


@dataclass
class CrosstermReport:
    pairs: List[Dict]
    trials: int
    threshold: float = AUDIT_THRESHOLD

    @property
    def median_abs_ratio(self) -> float:
        if not self.pairs:
            return 0.0
        return float(np.median([abs(p['total_centered']) for p in self.pairs]))

    @property
    def passed(self) -> bool:
        return self.median_abs_ratio <= self.threshold

    def to_dict(self) -> Dict:
        return {'pairs': self.pairs, 'trials': self.trials, 'threshold': self.threshold,
                'median_abs_ratio': self.median_abs_ratio, 'passed': self.passed}


def crossterm_audit(layers: Sequence[LayerState], num_pairs: int, trials: int = 100, seed: int = 0,
                    sampler: Optional[Callable[[LayerState, np.random.Generator], np.ndarray]] = None,
                    threshold: float = AUDIT_THRESHOLD) -> CrosstermReport:
    """Monte-Carlo estimate of the cross-layer terms the additive objective drops."""
    if len(layers) < 2:
        raise PreconditionError("crossterm audit needs at least two layers")
    rng = np.random.default_rng(seed)
    sampler = sampler or random_pruning
    all_pairs = [(i, j) for i in range(len(layers)) for j in range(i + 1, len(layers))]
    chosen = rng.choice(len(all_pairs), size=min(num_pairs, len(all_pairs)), replace=False)

    report = []
    for p in sorted(chosen):
        i, j = all_pairs[p]
        li, lj = layers[i], layers[j]
        terms = np.zeros((4, trials))
        for t in range(trials):
            dw_i, dw_j = sampler(li, rng), sampler(lj, rng)
            terms[:, t] = (li.mean_grad @ dw_i, 0.5 * quad_form(li.fisher, dw_i),
                           lj.mean_grad @ dw_j, 0.5 * quad_form(lj.fisher, dw_j))
        stats = crossterm_terms(*terms)
        stats.update(layer_i=li.layer_id, layer_j=lj.layer_id)
        report.append(stats)
        logger.info(f"crossterm {li.layer_id} x {lj.layer_id}: total={stats['total']:.4f} "
                    f"centered={stats['total_centered']:.4f}")
    return CrosstermReport(report, trials, threshold)


def additivity_check(params: ParamSet, calib: CalibBatch, curves: Dict[str, DistortionCurve],
                     alphas: Dict[str, float], shape: BlockShape, orders: Dict[str, np.ndarray],
                     kind: str = 'ce') -> Dict[str, Optional[float]]:
    """Compare sum_i delta_i^2 against the measured mean squared change of f.

    Informational only: second-order truncation error is unbounded in general.
    """
    pruned = params.copy()
    predicted = 0.0
    for lid, alpha in alphas.items():
        curve = curves[lid]
        k = int(np.argmin(np.abs(curve.grid - alpha)))
        predicted += float(curve.delta[k] ** 2)
        w = pruned.weights[lid]
        br, bc = shape.grid(*w.shape, name=lid)
        pruned_blocks = orders[lid][:pruned_block_count(alpha, br * bc)]
        pruned.weights[lid] = apply_mask(w, BlockMask.from_pruned(br, bc, pruned_blocks), shape)
    pruned.touch()

    diffs = []
    for i in range(calib.n):
        sample = calib.subset([i])
        f0, _ = scalar_proxy(forward(params, sample)[0], sample.labels, kind)
        f1, _ = scalar_proxy(forward(pruned, sample)[0], sample.labels, kind)
        diffs.append((f0 - f1) ** 2)
    measured = float(np.mean(diffs))
    ratio = predicted / measured if measured > 0 else None
    return {'predicted': predicted, 'measured': measured, 'ratio': ratio}
