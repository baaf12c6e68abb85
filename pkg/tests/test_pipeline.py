#!/usr/bin/env python3
"""
End-to-end tests for the pipeline commands and the CLI
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

parent_dir = Path(__file__).parent.parent
sys.path.insert(0, str(parent_dir))

from main import main
from pruning.allocator import AllocationPlan
from pruning.errors import ShapeError
from pruning.pipeline import (
    BENCH_COLUMNS, FINETUNED_FILE, MODEL_FILE, PRUNED_FILE, SWEEP_COLUMNS, PruningPipeline, apply_plan,
    model_alphas, recover_masks,
)
from pruning.power import flops_ratio, layer_costs_for
from pruning.tensor import BlockShape, block_view
from utils.config import RunConfig
from utils.storage import ModelStore

RUN = {
    'model': {'image_size': 8, 'patch_size': 4, 'embed_dim': 8, 'num_heads': 2, 'depth': 1,
              'mlp_ratio': 2.0, 'num_classes': 4},
    'block_shape': '4x4',
    'grid_size': 4,
    'flops_target': 0.6,
    'calib_size': 16,
    'train_epochs': 3,
    'finetune_epochs': 2,
    'samples_per_class': 8,
    'test_samples_per_class': 4,
    'audit_pairs': 2,
    'audit_trials': 5,
    'sweep_shapes': ['2x2', '4x4'],
}


def pipeline_for(out_dir, **overrides):
    return PruningPipeline(RunConfig.load(overrides={**RUN, 'output_dir': str(out_dir), **overrides}))


@pytest.fixture(scope='module')
def run_dir(tmp_path_factory):
    """Trained and pruned toy model shared by the tests in this module."""
    out = tmp_path_factory.mktemp('run')
    pipeline = pipeline_for(out)
    train = pipeline.cmd_train()
    prune = pipeline.cmd_prune()
    return {'out': out, 'train': train, 'prune': prune}


def load(path):
    return ModelStore(str(Path(path).parent)).load_model(path)


@pytest.mark.slow
class TestTrainAndPrune:
    """train and prune commands"""

    def test_train_is_deterministic(self, run_dir, tmp_path):
        pipeline_for(tmp_path).cmd_train()
        assert (tmp_path / MODEL_FILE).read_bytes() == (run_dir['out'] / MODEL_FILE).read_bytes()

    def test_zero_epochs_saves_initial_model(self, tmp_path):
        result = pipeline_for(tmp_path, train_epochs=0).cmd_train()
        assert 0.0 <= result['test_accuracy'] <= 1.0
        assert (tmp_path / MODEL_FILE).exists()

    def test_prune_meets_budget_and_writes_reports(self, run_dir):
        out, plan = run_dir['out'], run_dir['prune']['plan']
        assert plan.achieved_flops_ratio <= RUN['flops_target'] + 1e-12
        for name in ('plan.json', 'plan.csv', 'cost_report.json', 'baselines.json', 'crossterm_audit.json',
                     'additivity.json', PRUNED_FILE):
            assert (out / name).exists(), name
        assert len(list((out / 'curves').glob('*.csv'))) == 5
        baselines = json.loads((out / 'baselines.json').read_text())
        assert set(baselines) >= {'uniform', 'power_ablation'}

    def test_prune_is_deterministic(self, run_dir, tmp_path):
        pipeline_for(tmp_path).cmd_prune(run_dir['out'] / MODEL_FILE)
        assert (tmp_path / 'plan.json').read_bytes() == (run_dir['out'] / 'plan.json').read_bytes()

    def test_frozen_head_untouched(self, run_dir):
        dense, _, _ = load(run_dir['out'] / MODEL_FILE)
        pruned, shape, _ = load(run_dir['out'] / PRUNED_FILE)
        assert shape == BlockShape(4, 4)
        np.testing.assert_array_equal(pruned.weights['head'], dense.weights['head'])

    def test_plan_reapplied_is_identical(self, run_dir):
        out = run_dir['out']
        dense, _, _ = load(out / MODEL_FILE)
        pruned, shape, _ = load(out / PRUNED_FILE)
        plan = AllocationPlan.from_dict(ModelStore(str(out)).load_report(out / 'plan.json', 'allocation_plan'))
        again = apply_plan(dense, plan, shape)
        for lid in dense.layer_ids:
            np.testing.assert_array_equal(again.weights[lid], pruned.weights[lid])

    def test_zero_blocks_match_plan(self, run_dir):
        pruned, shape, _ = load(run_dir['out'] / PRUNED_FILE)
        alphas = model_alphas(pruned, shape)
        for lid, alpha in run_dir['prune']['plan'].alphas.items():
            assert alphas[lid] == pytest.approx(alpha)

    def test_full_budget_leaves_model_unchanged(self, run_dir, tmp_path):
        pipeline_for(tmp_path, flops_target=1.0).cmd_prune(run_dir['out'] / MODEL_FILE)
        dense, _, _ = load(run_dir['out'] / MODEL_FILE)
        pruned, _, _ = load(tmp_path / PRUNED_FILE)
        for name, array in dense.tensors().items():
            np.testing.assert_array_equal(pruned.tensors()[name], array)

    def test_non_divisible_layer_rejected(self, run_dir, tmp_path):
        pipeline = pipeline_for(tmp_path, block_shape='3x3', frozen_layers=[])
        with pytest.raises(ShapeError):
            pipeline.cmd_prune(run_dir['out'] / MODEL_FILE)


@pytest.mark.slow
class TestLaterStages:
    """finetune, eval, bench and sweep on the shared run"""

    def test_finetune_keeps_masks(self, run_dir, tmp_path):
        pipeline = pipeline_for(tmp_path)
        result = pipeline.cmd_finetune(run_dir['out'] / PRUNED_FILE)
        pruned, shape, _ = load(run_dir['out'] / PRUNED_FILE)
        tuned, tuned_shape, _ = load(tmp_path / FINETUNED_FILE)
        assert tuned_shape == shape
        before = recover_masks(pruned, shape, skip=['head'])
        for lid, mask in before.items():
            tiles = block_view(tuned.weights[lid], shape)
            assert not tiles[~mask.bits].any(), lid
        assert (tmp_path / 'finetune.json').exists()
        assert 0.0 <= result['accuracy_after'] <= 1.0

    def test_zero_epoch_finetune_is_identity(self, run_dir, tmp_path):
        pipeline_for(tmp_path, finetune_epochs=0).cmd_finetune(run_dir['out'] / PRUNED_FILE)
        pruned, _, _ = load(run_dir['out'] / PRUNED_FILE)
        tuned, _, _ = load(tmp_path / FINETUNED_FILE)
        for name, array in pruned.tensors().items():
            np.testing.assert_array_equal(tuned.tensors()[name], array)

    def test_eval_matches_train_accuracy(self, run_dir, tmp_path):
        result = pipeline_for(tmp_path).cmd_eval(run_dir['out'] / MODEL_FILE)
        assert result['accuracy'] == run_dir['train']['test_accuracy']
        assert result['cost_report']['flops_ratio'] == 1.0

    def test_eval_flops_match_plan(self, run_dir, tmp_path):
        result = pipeline_for(tmp_path).cmd_eval(run_dir['out'] / PRUNED_FILE)
        plan = run_dir['prune']['plan']
        assert result['cost_report']['flops_ratio'] == pytest.approx(plan.achieved_flops_ratio, abs=1e-12)
        assert (tmp_path / 'eval.json').exists()

    def test_bench(self, run_dir, tmp_path):
        frame = pipeline_for(tmp_path).cmd_bench(run_dir['out'] / PRUNED_FILE)
        assert list(frame.columns) == BENCH_COLUMNS
        assert list(frame['mode']) == ['dense', 'dense_reference', 'bsr', 'kernel', 'kernel', 'kernel']
        dense, reference, bsr = frame.iloc[0], frame.iloc[1], frame.iloc[2]
        assert dense['macs'] == reference['macs']
        assert bsr['macs'] < dense['macs']
        assert bsr['density'] < 1.0
        assert (tmp_path / 'bench.csv').exists()

    def test_sweep(self, run_dir, tmp_path):
        frame = pipeline_for(tmp_path).cmd_sweep(run_dir['out'] / MODEL_FILE)
        assert list(frame.columns) == SWEEP_COLUMNS
        assert list(frame['block_shape']) == ['2x2', '4x4']
        assert (frame['flops_ratio'] <= RUN['flops_target'] + 1e-12).all()


def gives_back_nothing(alphas, costs, shape, R, grid_size):
    """No pruned layer can return one grid step without breaking the budget."""
    for lid, alpha in alphas.items():
        if alpha > 0.0:
            trial = {**alphas, lid: round(alpha - 1.0 / grid_size, 12)}
            if flops_ratio(costs, trial, shape) <= R:
                return False
    return True


@pytest.mark.slow
class TestPowerAwareBudget:
    """Power-weighted allocation on the trained toy model"""

    @pytest.mark.parametrize("beta", [0.1, 1.0, 10.0])
    def test_power_term_stays_at_the_budget(self, run_dir, tmp_path, beta):
        pipeline = pipeline_for(tmp_path, beta=beta, ablation_beta=beta)
        plan = pipeline.cmd_prune(run_dir['out'] / MODEL_FILE)['plan']
        costs = layer_costs_for(pipeline.model_config, pipeline.config.batch_granularity)
        shape, R = BlockShape(4, 4), RUN['flops_target']
        assert plan.achieved_flops_ratio <= R + 1e-12
        assert gives_back_nothing(plan.alphas, costs, shape, R, RUN['grid_size'])
        powered = json.loads((tmp_path / 'baselines.json').read_text())['power_ablation']['beta']
        assert powered['achieved_flops_ratio'] <= R + 1e-12
        assert gives_back_nothing(powered['alphas'], costs, shape, R, RUN['grid_size'])

    @pytest.mark.parametrize("seed", range(5))
    def test_power_ablation_lowers_power(self, run_dir, tmp_path, seed):
        pipeline = pipeline_for(tmp_path, seed=seed, flops_target=0.5, ablation_beta=1.0)
        pipeline.cmd_prune(run_dir['out'] / MODEL_FILE)
        ablation = json.loads((tmp_path / 'baselines.json').read_text())['power_ablation']
        assert ablation['beta']['estimated_power'] <= ablation['zero']['estimated_power'] + 1e-9
        assert ablation['beta']['achieved_flops_ratio'] <= 0.5 + 1e-12


@pytest.mark.slow
def test_default_config_recovers_after_finetune(tmp_path):
    config = RunConfig.load(str(parent_dir / 'configs' / 'default.json'),
                            overrides={'output_dir': str(tmp_path), 'audit_pairs': 0})
    assert config.block_shape == '4x4' and config.flops_target == 0.5 and config.finetune_epochs == 20
    pipeline = PruningPipeline(config)
    dense = pipeline.cmd_train()
    assert dense['test_accuracy'] >= 0.9
    pruned = pipeline.cmd_prune()
    assert pruned['plan'].achieved_flops_ratio <= 0.5 + 1e-12
    tuned = pipeline.cmd_finetune()
    assert tuned['accuracy_after'] >= dense['test_accuracy'] - 0.03


@pytest.mark.slow
class TestCli:
    """Exit codes of the blockprune command"""

    @pytest.fixture
    def config_file(self, tmp_path):
        path = tmp_path / 'run.json'
        path.write_text(json.dumps(RUN), encoding='utf-8')
        return str(path)

    def test_eval_succeeds(self, run_dir, config_file, tmp_path):
        code = main(['eval', '--config', config_file, '--model', str(run_dir['out'] / MODEL_FILE),
                     '--out', str(tmp_path)])
        assert code == 0
        assert (tmp_path / 'eval.json').exists()

    def test_infeasible_target_exits_3(self, run_dir, config_file, tmp_path):
        code = main(['prune', '--config', config_file, '--model', str(run_dir['out'] / MODEL_FILE),
                     '--flops-target', '0.01', '--out', str(tmp_path)])
        assert code == 3

    def test_missing_model_exits_2(self, config_file, tmp_path):
        code = main(['eval', '--config', config_file, '--model', str(tmp_path / 'absent.bpmodel'),
                     '--out', str(tmp_path)])
        assert code == 2

    def test_bad_block_shape_exits_2(self, config_file, tmp_path):
        assert main(['train', '--config', config_file, '--block', 'abc', '--out', str(tmp_path)]) == 2
