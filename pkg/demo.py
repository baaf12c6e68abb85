#!/usr/bin/env python3
"""
blockprune - Demo Script

Runs the whole pipeline on a deliberately small model and prints what each
stage produced. Everything lands in ./demo_run.
"""

import sys
from pathlib import Path

# Add the current directory to Python path so we can import pruning and utils
current_dir = Path(__file__).parent
sys.path.insert(0, str(current_dir))

from pruning.errors import BlockPruneError
from pruning.pipeline import PruningPipeline
from pruning.power import named_arch_flops
from utils.config import RunConfig
from utils.logger import logger

DEMO_CONFIG = {
    'model': {'image_size': 16, 'patch_size': 4, 'embed_dim': 32, 'num_heads': 2,
              'depth': 2, 'mlp_ratio': 2.0, 'num_classes': 10},
    'block_shape': '4x4',
    'grid_size': 10,
    'flops_target': 0.5,
    'calib_size': 64,
    'train_epochs': 8,
    'finetune_epochs': 4,
    'samples_per_class': 30,
    'test_samples_per_class': 20,
    'audit_trials': 20,
    'output_dir': 'demo_run',
}


def demo_pipeline():
    """Train, prune, finetune and evaluate the demo model"""
    print("🚀 blockprune Demo")
    print("=" * 50)

    config = RunConfig.load(overrides=DEMO_CONFIG)
    pipeline = PruningPipeline(config)

    print("📋 Training toy vision transformer...")
    trained = pipeline.cmd_train()
    print(f"   ✅ test accuracy {trained['test_accuracy']:.4f}")

    print(f"\n✂️  Pruning to {config.flops_target:.0%} of dense FLOPs with {config.block_shape} blocks...")
    pruned = pipeline.cmd_prune()
    print(f"   ✅ FLOPs ratio {pruned['flops_ratio']:.4f}, accuracy {pruned['pruned_accuracy']:.4f}")
    for lid, alpha in pruned['plan'].alphas.items():
        print(f"     - {lid}: {alpha:.2f}")

    print("\n🔧 Finetuning with masks held fixed...")
    tuned = pipeline.cmd_finetune()
    print(f"   ✅ accuracy {tuned['accuracy_before']:.4f} -> {tuned['accuracy_after']:.4f}")

    print("\n📈 Benchmarking dense vs BSR forward...")
    bench = pipeline.cmd_bench()
    for rec in bench[bench['mode'] != 'kernel'].to_dict('records'):
        print(f"   {rec['mode']:<6} density {rec['density']:.3f}, {rec['macs']} MACs")


def demo_flops_counter():
    """FLOPs of the named architectures at 224x224"""
    print("\n📊 Named architecture FLOPs")
    print("=" * 50)
    for arch in ('deit-small', 'deit-base'):
        dense = named_arch_flops(arch)
        half = named_arch_flops(arch, linear_alpha=0.5)
        print(f"   {arch:<11} dense {dense / 1e9:.2f}G, half-pruned linears {half / 1e9:.2f}G")


def demo_timings():
    """Where the demo spent its time"""
    print("\n⏱️  Timings")
    print("=" * 50)
    for op, stats in sorted(logger.get_performance_summary().items()):
        print(f"   {op:<24} x{stats['count']:<4} total {stats['total_duration']:.3f}s")


def main():
    """Main demo function"""
    try:
        demo_pipeline()
        demo_flops_counter()
        demo_timings()
    except BlockPruneError as e:
        print(f"❌ Demo failed: {e}")
        return 1

    print("\n🎉 Demo completed successfully!")
    print("📁 Check the 'demo_run' directory for models, curves and reports")
    print()
    print("🚀 To run the full pipeline:")
    print("   python main.py train --config configs/default.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
