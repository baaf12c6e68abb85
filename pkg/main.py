#!/usr/bin/env python3
"""
blockprune - Main Application

Command-line entry point for hardware-aware block pruning of a small
vision transformer: train, prune, finetune, eval, bench and sweep.
"""

import sys
import argparse
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add dotenv support to load .env automatically
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    print("Warning: python-dotenv not installed. Install with: pip install python-dotenv")

# Add the current directory to Python path so we can import pruning and utils
current_dir = Path(__file__).parent
sys.path.insert(0, str(current_dir))

from utils.logger import get_logger, log_error, logger as main_logger
from pruning.errors import BlockPruneError
from pruning.pipeline import PruningPipeline
from utils.config import RunConfig

logger = get_logger('main')

COMMANDS = ('train', 'prune', 'finetune', 'eval', 'bench', 'sweep')

# CLI flag -> RunConfig field
OVERRIDES = {
    'flops_target': 'flops_target',
    'beta': 'beta',
    'block': 'block_shape',
    'grid': 'grid_size',
    'kappa': 'kappa',
    'calib': 'calib_size',
    'seed': 'seed',
    'out': 'output_dir',
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='blockprune',
        description="blockprune - hardware-aware block pruning for vision transformers",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  blockprune train --config configs/default.json              # Train the toy model
  blockprune prune --config configs/default.json --flops-target 0.5
  blockprune prune --block 8x8 --beta 1.0 --out runs/b8       # Power-aware allocation
  blockprune finetune --config configs/default.json           # Finetune runs/pruned.bpmodel
  blockprune eval --model runs/finetuned.bpmodel              # Accuracy and cost report
  blockprune bench --model runs/pruned.bpmodel                # Dense vs BSR timing
  blockprune sweep --config configs/default.json              # Block shape sweep
        """
    )
    parser.add_argument('command', choices=COMMANDS, help='Pipeline stage to run')
    parser.add_argument('--config', metavar='PATH', help='JSON run configuration')
    parser.add_argument('--model', metavar='PATH',
                        help='Input model file (default: the previous stage output in --out)')
    parser.add_argument('--flops-target', dest='flops_target', type=float, metavar='R',
                        help='Fraction of dense FLOPs the pruned model may keep')
    parser.add_argument('--beta', type=float, metavar='B', help='Weight of the power term')
    parser.add_argument('--block', metavar='BRxBC', help='Block shape, e.g. 4x4')
    parser.add_argument('--grid', type=int, metavar='K', help='Pruning ratio grid size')
    parser.add_argument('--kappa', type=float, metavar='X', help='Fisher diagonal regularizer')
    parser.add_argument('--calib', type=int, metavar='N', help='Calibration sample count')
    parser.add_argument('--seed', type=int, metavar='S', help='Master random seed')
    parser.add_argument('--out', metavar='DIR', help='Output directory')
    parser.add_argument('--log-level', metavar='LEVEL',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level (default: BLOCKPRUNE_LOG_LEVEL or INFO)')
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {field: getattr(args, flag) for flag, field in OVERRIDES.items()}
    return RunConfig.load(args.config, overrides)


def run_command(pipeline: PruningPipeline, command: str, model: Optional[str] = None) -> Any:
    if command == 'train':
        result = pipeline.cmd_train()
        print(f"✅ Model trained: train acc {result['train_accuracy']:.4f}, "
              f"test acc {result['test_accuracy']:.4f}")
        print(f"   Saved to {result['model']}")
    elif command == 'prune':
        result = pipeline.cmd_prune(model)
        print(f"✅ Model pruned: FLOPs ratio {result['flops_ratio']:.4f}, "
              f"accuracy {result['pruned_accuracy']:.4f}")
        for lid, alpha in result['plan'].alphas.items():
            print(f"   📋 {lid}: alpha={alpha:.3f}")
        print(f"   Saved to {result['model']}")
    elif command == 'finetune':
        result = pipeline.cmd_finetune(model)
        print(f"✅ Finetuned: accuracy {result['accuracy_before']:.4f} -> {result['accuracy_after']:.4f}")
        print(f"   Saved to {result['model']}")
    elif command == 'eval':
        result = pipeline.cmd_eval(model)
        report = result['cost_report']
        print(f"📊 Accuracy: {result['accuracy']:.4f}")
        print(f"   FLOPs ratio: {report['flops_ratio']:.4f}, params ratio: {report['params_ratio']:.4f}")
    elif command == 'bench':
        result = pipeline.cmd_bench(model)
        print("🚀 Benchmark:")
        for rec in result.to_dict('records'):
            print(f"   {rec['mode']:<7} density={rec['density']:.3f} "
                  f"time={rec['wall_time_ns'] / 1e6:.3f} ms macs={rec['macs']}")
    else:
        result = pipeline.cmd_sweep(model)
        print("🔍 Block shape sweep:")
        for rec in result.to_dict('records'):
            print(f"   {rec['block_shape']:<5} flops={rec['flops_ratio']:.4f} "
                  f"sparsity={rec['sparsity']:.4f} acc={rec['accuracy']:.4f}")
    return result


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point"""
    args = build_parser().parse_args(argv)
    if args.log_level:
        main_logger.set_level(args.log_level)
    logger.info(f"Starting blockprune {args.command}")

    try:
        config = config_from_args(args)
        pipeline = PruningPipeline(config)
        run_command(pipeline, args.command, args.model)
    except BlockPruneError as e:
        log_error('main', e, {'command': args.command})
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("\n👋 Interrupted")
        return 130

    logger.info(f"Finished blockprune {args.command}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
