"""
End-to-end pruning pipeline: train, prune, finetune, eval, bench, sweep.

Every command reads and writes files under ``config.output_dir``; files are
the only interface between commands. Masks are never stored on their own:
they are the zero blocks of a pruned weight at the block shape recorded in
the model header.
"""

import time
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from pruning.allocator import AllocationPlan, ablate_power, solve, uniform_plan
from pruning.bsr import BsrExecutor, MacCounter, bench_bsr, pack_params, time_call
from pruning.curves import (
    DistortionCurve, LayerState, additivity_check, crossterm_audit, delta_curve_incremental,
)
from pruning.errors import PreconditionError, ShapeError
from pruning.fisher import build_fisher
from pruning.model import (
    BlasExecutor, CalibBatch, LinearExecutor, ParamSet, accuracy, forward, inactive_heads, init_params,
    per_sample_grads, sgd_finetune, synth_dataset,
)
from pruning.power import cost_report, flops_ratio, layer_costs_for
from pruning.scoring import mask_from_order
from pruning.tensor import BlockMask, BlockShape, apply_mask
from utils.config import RunConfig
from utils.logger import get_logger, log_performance, log_stage
from utils.storage import ModelStore

logger = get_logger('pipeline')

MODEL_FILE = 'model.bpmodel'
PRUNED_FILE = 'pruned.bpmodel'
FINETUNED_FILE = 'finetuned.bpmodel'
BENCH_COLUMNS = ['mode', 'density', 'wall_time_ns', 'macs']
SWEEP_COLUMNS = ['block_shape', 'sparsity', 'flops_ratio', 'params_ratio', 'predicted_distortion', 'accuracy']
KERNEL_BENCH_DIM = 256
KERNEL_BENCH_DENSITIES = (1.0, 0.5, 0.25)
ADDITIVITY_SAMPLES = 64


def apply_plan(params: ParamSet, plan: AllocationPlan, shape: BlockShape) -> ParamSet:
    """Copy of ``params`` with every planned ratio applied along its stored prune order."""
    if plan.block_shape != str(shape):
        raise PreconditionError(f"plan was made for blocks {plan.block_shape}, not {shape}")
    pruned = params.copy()
    for lid, alpha in plan.alphas.items():
        if alpha == 0.0:
            continue
        if lid not in plan.orders:
            raise PreconditionError(f"plan has no prune order for layer {lid}")
        w = pruned.weights[lid]
        br, bc = shape.grid(*w.shape, name=lid)
        mask = mask_from_order(np.asarray(plan.orders[lid], dtype=np.int64), br, bc, alpha)
        pruned.weights[lid] = apply_mask(w, mask, shape)
    pruned.touch()
    return pruned


def recover_masks(params: ParamSet, shape: BlockShape, skip=()) -> Dict[str, BlockMask]:
    """Masks implied by the zero blocks of every divisible, non-skipped layer."""
    return {lid: BlockMask.from_matrix(w, shape) for lid, w in params.weights.items()
            if lid not in skip and shape.divides(*w.shape)}


def model_alphas(params: ParamSet, shape: Optional[BlockShape]) -> Dict[str, float]:
    """Pruned-block fraction of every linear layer (0 where the shape does not apply)."""
    out = {}
    for lid, w in params.weights.items():
        if shape is None or not shape.divides(*w.shape):
            out[lid] = 0.0
            continue
        mask = BlockMask.from_matrix(w, shape)
        out[lid] = (mask.num_blocks - mask.popcount) / mask.num_blocks
    return out


class PruningPipeline:
    """Runs the blockprune commands for one RunConfig"""

    def __init__(self, config: RunConfig, store: Optional[ModelStore] = None):
        self.config = config
        self.out = Path(config.output_dir)
        self.store = store or ModelStore(str(self.out))
        self.model_config = config.model_config()
        self._data: Optional[Tuple[CalibBatch, CalibBatch]] = None

    # ---- shared steps --------------------------------------------------

    def data(self) -> Tuple[CalibBatch, CalibBatch]:
        if self._data is None:
            cfg = self.model_config
            self._data = synth_dataset(cfg.num_classes, self.config.samples_per_class, cfg.image_size,
                                       self.config.stream_seed('data'), self.config.test_samples_per_class)
        return self._data

    def _model_path(self, model_path, default: str) -> Path:
        return Path(model_path) if model_path else self.out / default

    def _load(self, model_path) -> Tuple[ParamSet, Optional[BlockShape], Dict]:
        params, shape, meta = self.store.load_model(model_path)
        if params.config != self.model_config:
            logger.warning(f"{model_path}: model config differs from the run config; using the stored one")
        return params, shape, meta

    def prunable_layers(self, params: ParamSet, shape: BlockShape, strict: bool = True) -> List[str]:
        layers = []
        for lid in params.layer_ids:
            if lid in self.config.frozen_layers:
                continue
            if not shape.divides(*params.weights[lid].shape):
                if strict:
                    rows, cols = params.weights[lid].shape
                    raise ShapeError(f"{lid}: weight {rows}x{cols} is not divisible by block shape {shape}; "
                                     f"add it to frozen_layers or pick another block shape")
                logger.warning(f"{lid}: not divisible by {shape}, kept dense")
                continue
            layers.append(lid)
        return layers

    def calibration_batch(self) -> CalibBatch:
        train, _ = self.data()
        rng = self.config.rng('calib')
        n = min(self.config.calib_size, train.n)
        return train.subset(np.sort(rng.choice(train.n, size=n, replace=False)))

    def layer_states(self, params: ParamSet, grads: Dict[str, np.ndarray], shape: BlockShape,
                     layers: List[str]) -> List[LayerState]:
        states = []
        for lid in layers:
            stash = grads[lid]
            fisher = build_fisher(stash, self.config.kappa, lid, self.config.dense_cap)
            states.append(LayerState(lid, params.weights[lid], shape, stash.mean(axis=0), fisher))
        return states

    def build_curves(self, states: List[LayerState]) -> List[DistortionCurve]:
        curves = []
        for state in states:
            curve = delta_curve_incremental(state, self.config.grid_size)
            logger.info(f"{state.layer_id}: {state.num_blocks} blocks, fisher {state.fisher.mode}, "
                        f"delta(1)={curve.delta[-1]:.6g}")
            curves.append(curve)
        return curves

    # ---- commands ------------------------------------------------------

    def cmd_train(self) -> Dict:
        """Train a ToyViT on the synthetic set and save it."""
        start = time.time()
        cfg = self.model_config
        train, test = self.data()
        log_stage('pipeline', 'train', {'epochs': self.config.train_epochs, 'samples': train.n})
        params = init_params(cfg, self.config.rng('init'))
        params = sgd_finetune(params, None, train, self.config.train_epochs, self.config.train_lr,
                              self.config.momentum, batch_size=self.config.batch_size,
                              seed=self.config.stream_seed('train'), clip_norm=self.config.grad_clip)
        result = {'train_accuracy': accuracy(params, train), 'test_accuracy': accuracy(params, test)}
        path = self.store.save_model(self.out / MODEL_FILE, params, meta={'stage': 'train', **result})
        logger.info(f"trained model: train acc {result['train_accuracy']:.4f}, "
                    f"test acc {result['test_accuracy']:.4f} -> {path}")
        log_performance('cmd_train', time.time() - start, result)
        return {**result, 'model': str(path)}

    def cmd_prune(self, model_path=None) -> Dict:
        """Score, build curves, allocate ratios and write the pruned model plus reports."""
        start = time.time()
        cfg = self.config
        shape = cfg.shape
        params, _, _ = self._load(self._model_path(model_path, MODEL_FILE))
        layers = self.prunable_layers(params, shape)

        calib = self.calibration_batch()
        log_stage('pipeline', 'calibrate', {'samples': calib.n, 'layers': layers, 'loss': cfg.loss})
        grads = per_sample_grads(params, calib, cfg.loss, layers)
        if cfg.save_grad_stash:
            self.store.save_grad_stash(self.out / 'grad_stash.bpmodel', params.config, grads)

        states = self.layer_states(params, grads, shape, layers)
        curves = self.build_curves(states)
        for curve in curves:
            self.store.save_table(self.out / 'curves' / f'{curve.layer_id}.csv', curve.to_frame())

        costs = layer_costs_for(params.config, cfg.batch_granularity)
        log_stage('pipeline', 'allocate', {'flops_target': cfg.flops_target, 'beta': cfg.beta})
        plan = solve(curves, costs, cfg.flops_target, cfg.beta, shape)
        plan.orders = {s.layer_id: s.order.tolist() for s in states}
        self.store.save_report(self.out / 'plan.json', plan.to_dict(), 'allocation_plan')
        self.store.save_table(self.out / 'plan.csv', plan.to_frame())

        pruned = apply_plan(params, plan, shape)
        report = cost_report(costs, plan.alphas, shape)
        heads = inactive_heads(pruned)
        self.store.save_report(self.out / 'cost_report.json', {**report.to_dict(), 'inactive_heads': heads},
                               'cost_report')

        baselines = {'uniform': uniform_plan(curves, costs, cfg.flops_target, shape).to_dict()}
        if cfg.ablation_beta > 0:
            powered, zero = ablate_power(curves, costs, cfg.flops_target, shape, cfg.ablation_beta)
            baselines['power_ablation'] = {'beta': powered.to_dict(), 'zero': zero.to_dict()}
        self.store.save_report(self.out / 'baselines.json', baselines, 'allocation_baselines')

        if cfg.audit_pairs > 0 and len(states) >= 2:
            audit = crossterm_audit(states, cfg.audit_pairs, cfg.audit_trials, cfg.stream_seed('audit'))
            self.store.save_report(self.out / 'crossterm_audit.json', audit.to_dict(), 'crossterm_audit')
            sample = calib.subset(np.arange(min(ADDITIVITY_SAMPLES, calib.n)))
            additivity = additivity_check(params, sample, {c.layer_id: c for c in curves},
                                          {lid: plan.alphas[lid] for lid in layers}, shape,
                                          {s.layer_id: s.order for s in states}, cfg.loss)
            self.store.save_report(self.out / 'additivity.json', additivity, 'additivity_check')
            if not audit.passed:
                logger.warning(f"cross-layer terms are not negligible: median |ratio| "
                               f"{audit.median_abs_ratio:.3f} > {audit.threshold}")

        _, test = self.data()
        result = {
            'flops_ratio': plan.achieved_flops_ratio,
            'predicted_distortion': plan.predicted_distortion,
            'pruned_accuracy': accuracy(pruned, test),
            'inactive_heads': heads,
        }
        path = self.store.save_model(self.out / PRUNED_FILE, pruned, shape,
                                     meta={'stage': 'prune', 'flops_target': cfg.flops_target,
                                           'flops_ratio': plan.achieved_flops_ratio})
        if cfg.plot:
            from utils.plots import curves_figure, sparsity_figure, write_figure
            write_figure(curves_figure(curves), self.out / 'figures' / 'curves.html')
            write_figure(sparsity_figure(plan.alphas), self.out / 'figures' / 'sparsity.html')

        logger.info(f"pruned model: flops ratio {plan.achieved_flops_ratio:.4f}, "
                    f"accuracy {result['pruned_accuracy']:.4f} -> {path}")
        log_performance('cmd_prune', time.time() - start, {'layers': len(layers)})
        return {**result, 'model': str(path), 'plan': plan}

    def cmd_finetune(self, model_path=None) -> Dict:
        """Finetune a pruned model with its zero blocks held at zero."""
        start = time.time()
        cfg = self.config
        params, shape, meta = self._load(self._model_path(model_path, PRUNED_FILE))
        if shape is None:
            raise PreconditionError("model has no stored block shape; finetune expects a pruned model")
        masks = recover_masks(params, shape, skip=cfg.frozen_layers)
        train, test = self.data()
        before = accuracy(params, test)
        log_stage('pipeline', 'finetune', {'epochs': cfg.finetune_epochs, 'lr': cfg.finetune_lr,
                                           'block_shape': str(shape)})
        tuned = sgd_finetune(params, masks, train, cfg.finetune_epochs, cfg.finetune_lr, cfg.momentum,
                             shape, cfg.batch_size, cfg.stream_seed('finetune'), clip_norm=cfg.grad_clip)
        after = accuracy(tuned, test)
        result = {'accuracy_before': before, 'accuracy_after': after, 'epochs': cfg.finetune_epochs}
        self.store.save_report(self.out / 'finetune.json', result, 'finetune')
        path = self.store.save_model(self.out / FINETUNED_FILE, tuned, shape,
                                     meta={**meta, 'stage': 'finetune', 'test_accuracy': after})
        logger.info(f"finetuned: accuracy {before:.4f} -> {after:.4f} -> {path}")
        log_performance('cmd_finetune', time.time() - start, result)
        return {**result, 'model': str(path)}

    def cmd_eval(self, model_path=None) -> Dict:
        """Top-1 test accuracy and the cost report of a stored model."""
        params, stored_shape, _ = self._load(self._model_path(model_path, MODEL_FILE))
        shape = stored_shape or self.config.shape
        _, test = self.data()
        alphas = model_alphas(params, stored_shape)
        report = cost_report(layer_costs_for(params.config, self.config.batch_granularity), alphas, shape)
        result = {
            'accuracy': accuracy(params, test),
            'cost_report': report.to_dict(),
            'inactive_heads': inactive_heads(params),
        }
        self.store.save_report(self.out / 'eval.json', result, 'eval')
        logger.info(f"accuracy {result['accuracy']:.4f}, flops ratio {report.flops_ratio:.4f}, "
                    f"params ratio {report.params_ratio:.4f}")
        return result

    def cmd_bench(self, model_path=None) -> pd.DataFrame:
        """Dense versus BSR forward timing of a pruned model, plus a kernel density sweep."""
        cfg = self.config
        params, shape, _ = self._load(self._model_path(model_path, PRUNED_FILE))
        shape = shape or cfg.shape
        _, test = self.data()
        batch = test.subset(np.arange(min(cfg.batch_size, test.n)))
        packed = pack_params(params.weights, shape)
        kept = sum(b.nnz_blocks for b in packed.values())
        total = sum(b.block_rows * b.block_cols for b in packed.values())

        rows = []
        for mode, executor_for in (('dense', lambda c: BlasExecutor(c)),
                                   ('dense_reference', lambda c: LinearExecutor(c)),
                                   ('bsr', lambda c: BsrExecutor(packed, c))):
            counter = MacCounter()
            forward(params, batch, executor_for(counter))
            executor = executor_for(None)
            wall = time_call(lambda: forward(params, batch, executor), cfg.bench_reps, cfg.bench_warmup)
            density = kept / total if mode == 'bsr' else 1.0
            rows.append({'mode': mode, 'density': density, 'wall_time_ns': wall, 'macs': counter.macs})
            logger.info(f"bench {mode}: density {density:.3f}, {wall} ns, {counter.macs} MACs")

        dim = KERNEL_BENCH_DIM
        if shape.divides(dim, dim):
            sweep = bench_bsr(dim, dim, dim, shape, KERNEL_BENCH_DENSITIES, cfg.bench_reps, cfg.bench_warmup,
                              cfg.stream_seed('bench'))
            for rec in sweep.to_dict('records'):
                rows.append({'mode': 'kernel', **rec})

        frame = pd.DataFrame(rows, columns=BENCH_COLUMNS)
        self.store.save_table(self.out / 'bench.csv', frame)
        return frame

    def cmd_sweep(self, model_path=None) -> pd.DataFrame:
        """Allocation and unfinetuned accuracy at R for each block shape in sweep_shapes."""
        cfg = self.config
        params, _, _ = self._load(self._model_path(model_path, MODEL_FILE))
        _, test = self.data()
        calib = self.calibration_batch()
        candidates = [lid for lid in params.layer_ids if lid not in cfg.frozen_layers]
        grads = per_sample_grads(params, calib, cfg.loss, candidates)
        costs = layer_costs_for(params.config, cfg.batch_granularity)
        total_weights = sum(w.size for w in params.weights.values())

        rows = []
        for text in cfg.sweep_shapes:
            shape = BlockShape.parse(text)
            layers = self.prunable_layers(params, shape, strict=False)
            states = self.layer_states(params, grads, shape, layers)
            curves = self.build_curves(states)
            plan = solve(curves, costs, cfg.flops_target, cfg.beta, shape)
            plan.orders = {s.layer_id: s.order.tolist() for s in states}
            pruned = apply_plan(params, plan, shape)
            zeroed = sum(int((w == 0).sum()) - int((params.weights[lid] == 0).sum())
                         for lid, w in pruned.weights.items())
            rows.append({
                'block_shape': text,
                'sparsity': zeroed / total_weights,
                'flops_ratio': flops_ratio(costs, plan.alphas, shape),
                'params_ratio': cost_report(costs, plan.alphas, shape).params_ratio,
                'predicted_distortion': plan.predicted_distortion,
                'accuracy': accuracy(pruned, test),
            })
            log_stage('pipeline', 'sweep', rows[-1])

        frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
        self.store.save_table(self.out / 'sweep.csv', frame)
        return frame
