"""
Layerwise pruning-ratio allocation under a FLOPs budget.

Each layer picks the grid ratio where its distortion slope meets the
per-layer target ``lambda + beta * M*N*K / (b_c*b_r)``; the shared
multiplier ``lambda`` is bisected until the network meets the FLOPs ratio
``R``. Larger ``lambda`` never prunes less, so the FLOPs ratio is
nonincreasing in ``lambda``. ``lambda`` may be negative: the power offset
shifts every target up and the bracket starts below all of them.

A local search over single grid steps then polishes the rounded result
against ``sum(delta^2) + beta * power`` among plans that prune no more than
the budget requires.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from pruning.curves import DistortionCurve
from pruning.errors import InfeasibleConstraintError, PreconditionError
from pruning.power import LayerCost, layer_flops, layer_power
from pruning.tensor import BlockShape
from utils.logger import get_logger, log_stage

logger = get_logger('allocator')

BISECTION_STEPS = 64
PLAN_COLUMNS = ['layer_id', 'alpha', 'flops_kept', 'power']
_EPS = 1e-12


def target_slope(lam: float, beta: float, cost: LayerCost, shape: BlockShape) -> float:
    return lam + beta * cost.M * cost.N * cost.K / (shape.b_c * shape.b_r)


def slope_index(curve: DistortionCurve, target: float) -> int:
    """Number of leading grid segments whose monotone slope is <= target."""
    return int(np.searchsorted(curve.monotone_slope(), target, side='right'))


def alpha_for_slope(curve: DistortionCurve, target: float) -> float:
    """Largest grid ratio before the curve gets steeper than ``target``."""
    return float(curve.grid[slope_index(curve, target)])


@dataclass
class AllocationPlan:
    alphas: Dict[str, float]
    lambda_star: Optional[float]
    beta: float
    flops_target: float
    achieved_flops_ratio: float
    estimated_power: float
    predicted_distortion: float
    block_shape: str
    grid_size: int
    method: str = 'lagrangian'
    layers: List[Dict] = field(default_factory=list)
    orders: Dict[str, List[int]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            'alphas': self.alphas,
            'lambda_star': self.lambda_star,
            'beta': self.beta,
            'flops_target': self.flops_target,
            'achieved_flops_ratio': self.achieved_flops_ratio,
            'estimated_power': self.estimated_power,
            'predicted_distortion': self.predicted_distortion,
            'block_shape': self.block_shape,
            'grid_size': self.grid_size,
            'method': self.method,
            'layers': self.layers,
            'orders': self.orders,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "AllocationPlan":
        plan = cls(**{k: data[k] for k in (
            'alphas', 'lambda_star', 'beta', 'flops_target', 'achieved_flops_ratio',
            'estimated_power', 'predicted_distortion', 'block_shape', 'grid_size')},
            method=data.get('method', 'lagrangian'),
            layers=data.get('layers', []),
            orders=data.get('orders', {}))
        plan.validate()
        return plan

    def validate(self):
        for lid, alpha in self.alphas.items():
            k = alpha * self.grid_size
            if not 0.0 <= alpha <= 1.0 or abs(k - round(k)) > 1e-9:
                raise PreconditionError(f"{lid}: ratio {alpha} is not on the {self.grid_size}-step grid")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.layers, columns=PLAN_COLUMNS)

    @property
    def total_alpha(self) -> float:
        return sum(self.alphas.values())


class _PlanTables:
    """Per-layer FLOPs, power and distortion at every grid index."""

    def __init__(self, curves: Sequence[DistortionCurve], costs: Sequence[LayerCost],
                 beta: float, shape: BlockShape):
        by_id = {c.layer_id: c for c in costs}
        missing = [c.layer_id for c in curves if c.layer_id not in by_id]
        if missing:
            raise PreconditionError(f"no layer cost for curve(s): {', '.join(missing)}")
        if len({c.layer_id for c in curves}) != len(curves):
            raise PreconditionError("duplicate layer ids among curves")
        self.curves = list(curves)
        self.costs = list(costs)
        self.curve_costs = [by_id[c.layer_id] for c in curves]
        self.beta = beta
        self.shape = shape
        curve_ids = {c.layer_id for c in curves}
        self.fixed_flops = sum(c.flops_dense for c in costs if c.layer_id not in curve_ids)
        self.dense = sum(c.flops_dense for c in costs)
        self.flops = [np.array([layer_flops(cost, a, shape) for a in curve.grid], dtype=np.float64)
                      for curve, cost in zip(self.curves, self.curve_costs)]
        self.power = [np.array([layer_power(cost, a, shape) for a in curve.grid])
                      for curve, cost in zip(self.curves, self.curve_costs)]
        self.dist = [curve.distortion for curve in self.curves]
        self.K = [curve.K for curve in self.curves]

    def ratio(self, idx: Sequence[int]) -> float:
        return (self.fixed_flops + sum(f[k] for f, k in zip(self.flops, idx))) / self.dense

    def distortion(self, idx: Sequence[int]) -> float:
        return float(sum(d[k] for d, k in zip(self.dist, idx)))

    def power_at(self, idx: Sequence[int]) -> float:
        return float(sum(p[k] for p, k in zip(self.power, idx)))

    def objective(self, idx: Sequence[int]) -> float:
        return self.distortion(idx) + self.beta * self.power_at(idx)

    def indices_at(self, lam: float) -> List[int]:
        return [slope_index(curve, target_slope(lam, self.beta, cost, self.shape))
                for curve, cost in zip(self.curves, self.curve_costs)]

    def indices_of(self, alphas: Dict[str, float]) -> List[int]:
        return [int(round(alphas.get(c.layer_id, 0.0) * c.K)) for c in self.curves]

    def max_offset(self) -> float:
        return max((target_slope(0.0, self.beta, cost, self.shape) for cost in self.curve_costs), default=0.0)


def _feasible(tables: _PlanTables, idx, R: float) -> bool:
    return tables.ratio(idx) <= R + _EPS


def _better(delta_j: float, scale: float) -> bool:
    return delta_j < -_EPS * (1.0 + abs(scale))


def _fill(tables: _PlanTables, idx: List[int], R: float) -> List[int]:
    """Prune one step at a time, cheapest objective change first, until the budget is met."""
    while not _feasible(tables, idx, R):
        best = None
        for i in range(len(idx)):
            if idx[i] < tables.K[i]:
                trial = idx.copy()
                trial[i] += 1
                dj = tables.objective(trial) - tables.objective(idx)
                if best is None or dj < best[0]:
                    best = (dj, i)
        if best is None:
            break
        idx[best[1]] += 1
    return idx


def _saturate(tables: _PlanTables, idx: List[int], R: float) -> List[int]:
    """Un-prune one step at a time while the budget still holds.

    The result is maximal: no single layer can give back a grid step without
    exceeding R. Among the steps that fit, the one raising the objective
    least goes first.
    """
    while True:
        best = None
        for i in range(len(idx)):
            if idx[i] == 0:
                continue
            trial = idx.copy()
            trial[i] -= 1
            if not _feasible(tables, trial, R):
                continue
            dj = tables.objective(trial) - tables.objective(idx)
            if best is None or dj < best[0]:
                best = (dj, trial)
        if best is None:
            return idx
        idx = best[1]


def refine_plan(tables: _PlanTables, idx: Sequence[int], R: float) -> List[int]:
    """Single-step local search on sum(delta^2) + beta * power within the budget.

    Fill until feasible, then give back grid steps while the budget allows,
    so the plan never prunes more than R requires. An exchange moves one
    step of pruning from one layer to another, followed by the same give-back;
    it is kept only when the objective strictly falls. The power term only
    ranks plans that already use the budget, it never buys extra pruning.
    """
    idx = _saturate(tables, _fill(tables, list(idx), R), R)
    n = len(idx)
    while True:
        current = tables.objective(idx)
        best = None
        for i in range(n):
            if idx[i] == 0:
                continue
            for j in range(n):
                if j == i or idx[j] == tables.K[j]:
                    continue
                trial = idx.copy()
                trial[i] -= 1
                trial[j] += 1
                if not _feasible(tables, trial, R):
                    continue
                trial = _saturate(tables, trial, R)
                dj = tables.objective(trial) - current
                if _better(dj, current) and (best is None or dj < best[0]):
                    best = (dj, trial)
        if best is None:
            return idx
        idx = best[1]


def _check_budget(R: float):
    if not 0.0 < R <= 1.0:
        raise PreconditionError(f"FLOPs target must lie in (0, 1], got {R}")


def _make_plan(tables: _PlanTables, idx: Sequence[int], lam: Optional[float], R: float,
               method: str) -> AllocationPlan:
    alphas = {}
    curve_alpha = {c.layer_id: float(c.grid[k]) for c, k in zip(tables.curves, idx)}
    rows = []
    for cost in tables.costs:
        if not cost.prunable:
            continue
        alpha = curve_alpha.get(cost.layer_id, 0.0)
        alphas[cost.layer_id] = alpha
        power = layer_power(cost, alpha, tables.shape) if tables.shape.divides(cost.K, cost.N) else None
        rows.append({'layer_id': cost.layer_id, 'alpha': alpha,
                     'flops_kept': layer_flops(cost, alpha, tables.shape), 'power': power})
    grid_sizes = {c.K for c in tables.curves}
    return AllocationPlan(
        alphas=alphas,
        lambda_star=lam,
        beta=tables.beta,
        flops_target=R,
        achieved_flops_ratio=tables.ratio(idx),
        estimated_power=tables.power_at(idx),
        predicted_distortion=tables.distortion(idx),
        block_shape=str(tables.shape),
        grid_size=grid_sizes.pop() if len(grid_sizes) == 1 else 0,
        method=method,
        layers=rows,
    )


def solve(curves: Sequence[DistortionCurve], costs: Sequence[LayerCost], R: float, beta: float,
          shape: BlockShape, refine: bool = True,
          warm_start: Optional[Sequence[Dict[str, float]]] = None,
          power_cap: Optional[float] = None) -> AllocationPlan:
    """Allocate grid ratios meeting ``flops_ratio <= R`` with the least distortion.

    Costs without a curve (frozen layers, attention products) stay dense.
    ``warm_start`` plans are refined alongside the traversal result; each is
    also a candidate as given. The candidate with the lowest objective wins.
    ``power_cap`` drops candidates whose estimated power exceeds it; the
    warm starts must contain one that satisfies it.
    """
    _check_budget(R)
    if beta < 0:
        raise PreconditionError(f"beta must be nonnegative, got {beta}")
    tables = _PlanTables(curves, costs, beta, shape)
    lam_lo = -tables.max_offset() - 1.0

    zero = [0] * len(tables.curves)
    if _feasible(tables, zero, R):
        logger.info(f"dense plan already meets R={R}")
        return _make_plan(tables, zero, lam_lo, R, 'lagrangian')

    full = list(tables.K)
    floor = tables.ratio(full)
    if floor > R + _EPS:
        raise InfeasibleConstraintError(R, floor)

    lam_hi = 1.0
    while not _feasible(tables, tables.indices_at(lam_hi), R):
        lam_hi *= 2.0
        if math.isinf(lam_hi):
            raise InfeasibleConstraintError(R, floor)

    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lam_lo + lam_hi)
        if mid in (lam_lo, lam_hi):
            break
        if _feasible(tables, tables.indices_at(mid), R):
            lam_hi = mid
        else:
            lam_lo = mid

    idx = tables.indices_at(lam_hi)
    log_stage('allocator', 'lambda_traversal', {'lambda_star': lam_hi, 'flops_ratio': tables.ratio(idx),
                                                'target': R, 'beta': beta})
    if refine or warm_start:
        candidates = [refine_plan(tables, idx, R) if refine else idx]
        for alphas in warm_start or []:
            start = tables.indices_of(alphas)
            if _feasible(tables, start, R):
                candidates.append(start)
            if refine:
                candidates.append(refine_plan(tables, start, R))
        if power_cap is not None:
            capped = [c for c in candidates if tables.power_at(c) <= power_cap * (1.0 + _EPS) + _EPS]
            if not capped:
                raise PreconditionError(f"no candidate plan stays within the power cap {power_cap}")
            candidates = capped
        # lowest objective, then least total pruning, then the traversal result
        idx = min(candidates, key=lambda c: (tables.objective(c), sum(c)))

    plan = _make_plan(tables, idx, lam_hi, R, 'lagrangian')
    logger.info(f"allocation R={R} beta={beta}: flops_ratio={plan.achieved_flops_ratio:.4f} "
                f"distortion={plan.predicted_distortion:.6g} power={plan.estimated_power:.6g}")
    return plan


def power_sweep(curves: Sequence[DistortionCurve], costs: Sequence[LayerCost], R: float,
                shape: BlockShape, betas: Sequence[float]) -> List[AllocationPlan]:
    """One plan per beta, in ascending beta order, all at the same budget.

    Each plan is warm-started from the previous one and may not spend more
    power than it, so estimated power is nonincreasing along the sweep. The
    first plan is plain ``solve`` at the smallest beta.
    """
    betas = sorted(float(b) for b in betas)
    if not betas:
        raise PreconditionError("power sweep needs at least one beta")
    plans = [solve(curves, costs, R, betas[0], shape)]
    for beta in betas[1:]:
        previous = plans[-1]
        plans.append(solve(curves, costs, R, beta, shape, warm_start=[previous.alphas],
                           power_cap=previous.estimated_power))
    log_stage('allocator', 'power_sweep', {
        'betas': betas, 'power': [p.estimated_power for p in plans],
        'distortion': [p.predicted_distortion for p in plans],
    })
    return plans


def ablate_power(curves: Sequence[DistortionCurve], costs: Sequence[LayerCost], R: float,
                 shape: BlockShape, beta: float = 1.0) -> Tuple[AllocationPlan, AllocationPlan]:
    """(beta plan, beta=0 plan) at the same budget.

    The beta=0 plan is exactly ``solve(..., beta=0)``. The beta plan is
    warm-started from it and capped at its power, so it never spends more.
    """
    if beta <= 0:
        raise PreconditionError(f"ablation needs a positive beta, got {beta}")
    baseline, powered = power_sweep(curves, costs, R, shape, [0.0, beta])
    log_stage('allocator', 'power_ablation', {
        'beta': beta, 'power_beta': powered.estimated_power, 'power_zero': baseline.estimated_power,
        'distortion_beta': powered.predicted_distortion, 'distortion_zero': baseline.predicted_distortion,
    })
    return powered, baseline


def uniform_plan(curves: Sequence[DistortionCurve], costs: Sequence[LayerCost], R: float,
                 shape: BlockShape) -> AllocationPlan:
    """Smallest shared grid ratio that meets the budget."""
    _check_budget(R)
    tables = _PlanTables(curves, costs, 0.0, shape)
    if len(set(tables.K)) > 1:
        raise PreconditionError("uniform allocation needs curves on a common grid")
    K = tables.K[0] if tables.K else 0
    for k in range(K + 1):
        idx = [k] * len(tables.curves)
        if _feasible(tables, idx, R):
            return _make_plan(tables, idx, None, R, 'uniform')
    raise InfeasibleConstraintError(R, tables.ratio([K] * len(tables.curves)))
