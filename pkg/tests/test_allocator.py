#!/usr/bin/env python3
"""
Tests for layerwise ratio allocation
"""

import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

parent_dir = Path(__file__).parent.parent
sys.path.insert(0, str(parent_dir))

from pruning.allocator import (
    AllocationPlan, ablate_power, alpha_for_slope, power_sweep, solve, target_slope, uniform_plan,
)
from pruning.curves import DistortionCurve, ratio_grid
from pruning.errors import InfeasibleConstraintError, PreconditionError
from pruning.power import LayerCost, flops_ratio
from pruning.tensor import BlockShape

UNIT = BlockShape(1, 1)
K = 10


def power_curve(layer_id, scale, exponent, grid=K):
    g = ratio_grid(grid)
    return DistortionCurve(layer_id, g, scale * g ** exponent)


def equal_costs(ids):
    # 10 unit blocks per layer, so every grid step removes one block
    return [LayerCost(lid, M=1, N=K, K=1) for lid in ids]


def brute_force(curves, beta, R):
    """Lowest sum(delta^2) + beta * power over grid assignments that use the budget.

    An assignment uses the budget when no layer could give back a step
    without exceeding R; with beta=0 this is the plain constrained optimum.
    """
    total = K * len(curves)
    best = None
    for ks in itertools.product(range(K + 1), repeat=len(curves)):
        kept = sum(K - k for k in ks)
        if kept / total > R + 1e-12:
            continue
        if any(k > 0 for k in ks) and (kept + 1) / total <= R + 1e-12:
            continue
        value = sum(c.distortion[k] for c, k in zip(curves, ks)) + beta * kept
        if best is None or value < best:
            best = value
    return best


def gives_back_nothing(plan, curves, costs, R, shape=UNIT):
    """True when no layer can take back one grid step and stay within R."""
    for curve in curves:
        alpha = plan.alphas[curve.layer_id]
        if alpha == 0.0:
            continue
        trial = dict(plan.alphas, **{curve.layer_id: alpha - 1.0 / curve.K})
        if flops_ratio(costs, trial, shape) <= R + 1e-12:
            return False
    return True


class TestSlopes:
    """Per-layer slope targets"""

    def test_target_slope_offset(self):
        cost = LayerCost('fc', M=2, N=8, K=8)
        assert target_slope(1.0, 0.5, cost, BlockShape(4, 4)) == 1.0 + 0.5 * 2 * 8 * 8 / 16

    def test_alpha_for_slope(self):
        curve = DistortionCurve('x', ratio_grid(4), [0.0, 0.1, 0.3, 0.6, 1.0])
        assert alpha_for_slope(curve, -1.0) == 0.0
        assert alpha_for_slope(curve, 1e9) == 1.0
        slopes = curve.monotone_slope()
        assert alpha_for_slope(curve, slopes[1]) == 0.5


class TestSolve:
    """Lagrangian traversal plus local refinement"""

    @pytest.mark.parametrize("R", [0.3, 0.5, 0.8])
    def test_matches_exhaustive_search(self, R):
        curves = [power_curve('a', 1.0, 1.0), power_curve('b', 2.0, 1.5), power_curve('c', 3.0, 1.0)]
        plan = solve(curves, equal_costs('abc'), R, 0.0, UNIT)
        assert plan.achieved_flops_ratio <= R + 1e-12
        assert plan.predicted_distortion == pytest.approx(brute_force(curves, 0.0, R), rel=1e-9, abs=1e-12)

    def test_matches_exhaustive_search_with_power(self):
        curves = [power_curve('a', 1.0, 1.0), power_curve('b', 2.0, 1.5), power_curve('c', 3.0, 1.0)]
        beta = 0.02
        plan = solve(curves, equal_costs('abc'), 0.6, beta, UNIT)
        objective = plan.predicted_distortion + beta * plan.estimated_power
        assert objective == pytest.approx(brute_force(curves, beta, 0.6), rel=1e-9)

    @pytest.mark.parametrize("seed", range(20))
    def test_random_instances_near_exhaustive(self, seed):
        rng = np.random.default_rng(seed)
        curves = []
        for lid in 'abc':
            steps = np.sort(rng.uniform(0.01, 1.0, K))
            curves.append(DistortionCurve(lid, ratio_grid(K), np.concatenate([[0.0], np.cumsum(steps)])))
        R = float(rng.uniform(0.2, 0.9))
        plan = solve(curves, equal_costs('abc'), R, 0.0, UNIT)
        assert plan.achieved_flops_ratio <= R + 1e-12
        assert plan.predicted_distortion <= 1.05 * brute_force(curves, 0.0, R) + 1e-12

    def test_symmetric_layers_get_equal_ratios(self):
        curves = [power_curve(lid, 1.0, 1.0) for lid in 'abcd']
        plan = solve(curves, equal_costs('abcd'), 0.5, 0.0, UNIT)
        assert set(plan.alphas.values()) == {0.5}

    def test_full_budget_prunes_nothing(self):
        curves = [power_curve(lid, 1.0, 1.0) for lid in 'ab']
        plan = solve(curves, equal_costs('ab'), 1.0, 0.0, UNIT)
        assert plan.alphas == {'a': 0.0, 'b': 0.0}
        assert plan.achieved_flops_ratio == 1.0

    def test_infeasible_target_reports_floor(self):
        curves = [power_curve('a', 1.0, 1.0)]
        costs = equal_costs('a') + [LayerCost('frozen', M=1, N=K, K=1)]
        with pytest.raises(InfeasibleConstraintError) as info:
            solve(curves, costs, 0.2, 0.0, UNIT)
        assert info.value.floor == pytest.approx(0.5)
        assert info.value.exit_code == 3

    def test_layers_without_curves_stay_dense(self):
        curves = [power_curve('a', 1.0, 1.0)]
        costs = equal_costs('a') + [LayerCost('frozen', M=1, N=K, K=1),
                                    LayerCost('scores', M=1, N=K, K=1, kind='attention')]
        plan = solve(curves, costs, 0.8, 0.0, UNIT)
        assert plan.alphas['frozen'] == 0.0
        assert 'scores' not in plan.alphas
        assert plan.alphas['a'] == pytest.approx(0.6)
        assert flops_ratio(costs, plan.alphas, UNIT) == pytest.approx(plan.achieved_flops_ratio)

    def test_distortion_nonincreasing_in_budget(self):
        curves = [power_curve('a', 1.0, 1.0), power_curve('b', 2.0, 2.0), power_curve('c', 0.5, 1.0)]
        values = [solve(curves, equal_costs('abc'), R, 0.0, UNIT).predicted_distortion
                  for R in (0.2, 0.4, 0.6, 0.8)]
        assert all(later <= earlier + 1e-12 for earlier, later in zip(values, values[1:]))

    def test_bad_inputs(self):
        curves = [power_curve('a', 1.0, 1.0)]
        with pytest.raises(PreconditionError):
            solve(curves, equal_costs('a'), 0.0, 0.0, UNIT)
        with pytest.raises(PreconditionError):
            solve(curves, equal_costs('a'), 0.5, -1.0, UNIT)
        with pytest.raises(PreconditionError):
            solve(curves, equal_costs('b'), 0.5, 0.0, UNIT)


class TestBaselines:
    """Power ablation, power sweeps and uniform allocation"""

    def test_power_ablation_never_worse_on_weighted_objective(self):
        curves = [power_curve('a', 1.0, 1.0), power_curve('b', 2.0, 1.5), power_curve('c', 0.5, 2.0)]
        costs = [LayerCost('a', M=1, N=K, K=1), LayerCost('b', M=3, N=K, K=1), LayerCost('c', M=2, N=K, K=1)]
        powered, zero = ablate_power(curves, costs, 0.5, UNIT, beta=0.05)
        assert powered.beta == 0.05 and zero.beta == 0.0
        objective = lambda p: p.predicted_distortion + 0.05 * p.estimated_power
        assert objective(powered) <= objective(zero) + 1e-12
        assert powered.estimated_power <= zero.estimated_power
        for plan in (powered, zero):
            assert plan.achieved_flops_ratio <= 0.5 + 1e-12
            assert gives_back_nothing(plan, curves, costs, 0.5)

    def test_zero_plan_is_plain_solve(self):
        curves = [power_curve('a', 1.0, 1.0), power_curve('b', 2.0, 1.5)]
        costs = [LayerCost('a', M=1, N=K, K=1), LayerCost('b', M=3, N=K, K=1)]
        _, zero = ablate_power(curves, costs, 0.6, UNIT, beta=1.0)
        assert zero.to_dict() == solve(curves, costs, 0.6, 0.0, UNIT).to_dict()

    def test_power_moves_pruning_to_the_costly_layer(self):
        # a: 10 blocks of 2 FLOPs and power 1; b: 10 blocks of 6 FLOPs and power 3
        curves = [power_curve('a', 1.0, 1.0), power_curve('b', 1.0, 1.0)]
        costs = [LayerCost('a', M=1, N=K, K=1), LayerCost('b', M=3, N=K, K=1)]
        powered, zero = ablate_power(curves, costs, 0.5, UNIT, beta=1.0)
        assert zero.alphas == pytest.approx({'a': 0.2, 'b': 0.6})
        assert powered.alphas == pytest.approx({'a': 0.0, 'b': 0.7})
        assert powered.estimated_power == pytest.approx(19.0)
        assert zero.estimated_power == pytest.approx(20.0)
        assert powered.achieved_flops_ratio == pytest.approx(0.475)

    def test_single_layer_plans_identical(self):
        curves = [power_curve('fc', 1.0, 2.0, grid=8)]
        costs = [LayerCost('fc', M=16, N=32, K=32)]
        shape = BlockShape(4, 4)
        powered, zero = ablate_power(curves, costs, 0.5, shape, beta=1.0)
        assert powered.alphas == zero.alphas == {'fc': 0.5}
        assert powered.achieved_flops_ratio == zero.achieved_flops_ratio == 0.5

    def test_power_never_prunes_past_the_budget(self):
        curves = [power_curve('a', 1.0, 2.0, grid=8), power_curve('b', 3.0, 2.0, grid=8)]
        costs = [LayerCost('a', M=16, N=32, K=32), LayerCost('b', M=8, N=64, K=32)]
        shape = BlockShape(4, 4)
        for beta in (0.0, 1.0, 100.0):
            plan = solve(curves, costs, 0.8, beta, shape)
            assert plan.achieved_flops_ratio <= 0.8 + 1e-12
            assert gives_back_nothing(plan, curves, costs, 0.8, shape)

    @pytest.mark.parametrize("seed", range(5))
    def test_power_sweep_is_nonincreasing(self, seed):
        rng = np.random.default_rng(seed)
        curves = [power_curve(lid, float(rng.uniform(0.5, 3.0)), float(rng.uniform(1.0, 2.0))) for lid in 'abc']
        costs = [LayerCost(lid, M=int(rng.integers(1, 5)), N=K, K=1) for lid in 'abc']
        R = float(rng.uniform(0.3, 0.8))
        plans = power_sweep(curves, costs, R, UNIT, [10.0, 0.0, 1.0, 0.1])
        assert [p.beta for p in plans] == [0.0, 0.1, 1.0, 10.0]
        assert plans[0].to_dict() == solve(curves, costs, R, 0.0, UNIT).to_dict()
        powers = [p.estimated_power for p in plans]
        assert all(later <= earlier + 1e-9 for earlier, later in zip(powers, powers[1:]))
        for plan in plans:
            assert plan.achieved_flops_ratio <= R + 1e-12
            assert gives_back_nothing(plan, curves, costs, R)

    def test_power_sweep_needs_betas(self):
        with pytest.raises(PreconditionError):
            power_sweep([power_curve('a', 1.0, 1.0)], equal_costs('a'), 0.5, UNIT, [])

    def test_ablation_needs_positive_beta(self):
        with pytest.raises(PreconditionError):
            ablate_power([power_curve('a', 1.0, 1.0)], equal_costs('a'), 0.5, UNIT, beta=0.0)

    def test_uniform_plan(self):
        curves = [power_curve('a', 1.0, 1.0), power_curve('b', 5.0, 1.0)]
        plan = uniform_plan(curves, equal_costs('ab'), 0.65, UNIT)
        assert plan.method == 'uniform'
        assert plan.lambda_star is None
        assert plan.alphas == {'a': 0.4, 'b': 0.4}


class TestPlan:
    """Plan serialization and validation"""

    def test_dict_round_trip(self):
        curves = [power_curve('a', 1.0, 1.0), power_curve('b', 2.0, 1.0)]
        plan = solve(curves, equal_costs('ab'), 0.5, 0.0, UNIT)
        again = AllocationPlan.from_dict(plan.to_dict())
        assert again.alphas == plan.alphas
        assert again.lambda_star == plan.lambda_star
        assert list(plan.to_frame().columns) == ['layer_id', 'alpha', 'flops_kept', 'power']

    def test_off_grid_ratio_rejected(self):
        curves = [power_curve('a', 1.0, 1.0)]
        data = solve(curves, equal_costs('a'), 0.5, 0.0, UNIT).to_dict()
        data['alphas'] = {'a': 0.55}
        with pytest.raises(PreconditionError):
            AllocationPlan.from_dict(data)
