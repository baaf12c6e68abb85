"""
FLOPs and power models for dense and block-pruned GEMMs.

A linear layer ``y = x @ W`` with ``x: M x K`` and ``W: K x N`` is tiled
into ``(K / b_r) x (N / b_c)`` weight blocks. Its block-sparse power is

    P = p_m * (M / b_m) * ceil((1 - alpha) * (N / b_c) * (K / b_r))

and the network power is ``beta * sum_i P_i``. Attention score and context
products are carried as ``kind='attention'`` costs: they count toward FLOPs
but have no weight, no ratio and no power term.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Union

from pruning.errors import PreconditionError, ShapeError
from pruning.model import ToyViTConfig, layer_dims
from pruning.scoring import pruned_block_count
from pruning.tensor import BlockShape
from utils.logger import get_logger

logger = get_logger('power')

Alphas = Union[Sequence[float], Mapping[str, float]]

NAMED_ARCHS = {
    'deit-small': {'embed_dim': 384, 'num_heads': 6, 'depth': 12},
    'deit-base': {'embed_dim': 768, 'num_heads': 12, 'depth': 12},
}

FLOPS_INCLUSION = ('patch_embed', 'attn.qkv', 'attn.scores', 'attn.context', 'attn.proj',
                   'mlp.fc1', 'mlp.fc2', 'head')


@dataclass(frozen=True)
class LayerCost:
    layer_id: str
    M: int
    N: int
    K: int
    b_m: int = 1
    p_m: float = 1.0
    kind: str = 'linear'

    def __post_init__(self):
        if min(self.M, self.N, self.K, self.b_m) < 1:
            raise PreconditionError(f"{self.layer_id}: GEMM dims must be positive")
        if self.kind not in ('linear', 'attention'):
            raise PreconditionError(f"{self.layer_id}: unknown cost kind {self.kind!r}")

    @property
    def flops_dense(self) -> int:
        return 2 * self.M * self.N * self.K

    @property
    def macs(self) -> int:
        return self.M * self.N * self.K

    @property
    def prunable(self) -> bool:
        return self.kind == 'linear'

    def block_grid(self, shape: BlockShape):
        """``(K / b_r, N / b_c)``; the weight is K x N."""
        return shape.grid(self.K, self.N, name=self.layer_id)

    def num_blocks(self, shape: BlockShape) -> int:
        kr, nc = self.block_grid(shape)
        return kr * nc

    def kept_blocks(self, alpha: float, shape: BlockShape) -> int:
        nb = self.num_blocks(shape)
        return nb - pruned_block_count(alpha, nb)


def _check_alpha(alpha: float, layer_id: str):
    if not 0.0 <= alpha <= 1.0:
        raise PreconditionError(f"{layer_id}: pruning ratio must lie in [0, 1], got {alpha}")


def layer_power(cost: LayerCost, alpha: float, shape: BlockShape) -> float:
    """Block-sparse power of one linear layer; the ceiling is applied to the kept-block count."""
    if not cost.prunable:
        raise PreconditionError(f"{cost.layer_id}: attention products have no power term")
    _check_alpha(alpha, cost.layer_id)
    nb = cost.num_blocks(shape)
    # round first so (1 - alpha) * nb that should be integral is not pushed up by float error
    kept = math.ceil(round((1.0 - alpha) * nb, 9))
    return cost.p_m * (cost.M / cost.b_m) * kept


def align_alphas(costs: Sequence[LayerCost], alphas: Alphas) -> List[float]:
    """One ratio per cost entry; attention entries are always 0."""
    if isinstance(alphas, Mapping):
        out = []
        for c in costs:
            if c.layer_id in alphas:
                out.append(float(alphas[c.layer_id]))
            elif c.prunable:
                raise PreconditionError(f"no pruning ratio given for layer {c.layer_id}")
            else:
                out.append(0.0)
        return out
    alphas = [float(a) for a in alphas]
    if len(alphas) != len(costs):
        raise ShapeError(f"{len(costs)} layer costs but {len(alphas)} pruning ratios")
    return alphas


def network_power(costs: Sequence[LayerCost], alphas: Alphas, shape: BlockShape, beta: float) -> float:
    """beta * sum of layer_power over the linear entries."""
    alphas = align_alphas(costs, alphas)
    total = sum(layer_power(c, a, shape) for c, a in zip(costs, alphas) if c.prunable)
    return beta * total


def layer_flops(cost: LayerCost, alpha: float, shape: BlockShape) -> int:
    """FLOPs of one entry after pruning, counted from kept blocks."""
    _check_alpha(alpha, cost.layer_id)
    if not cost.prunable or alpha == 0.0:
        return cost.flops_dense
    return 2 * cost.M * cost.kept_blocks(alpha, shape) * shape.area


def flops_ratio(costs: Sequence[LayerCost], alphas: Alphas, shape: BlockShape) -> float:
    alphas = align_alphas(costs, alphas)
    kept = sum(layer_flops(c, a, shape) for c, a in zip(costs, alphas))
    dense = sum(c.flops_dense for c in costs)
    return kept / dense


@dataclass
class CostReport:
    layers: List[Dict]
    total_flops: int
    dense_flops: int
    total_power: float
    params_ratio: float
    block_shape: str
    included: List[str] = field(default_factory=lambda: list(FLOPS_INCLUSION))

    @property
    def flops_ratio(self) -> float:
        return self.total_flops / self.dense_flops

    def to_dict(self) -> Dict:
        return {
            'layers': self.layers,
            'total_flops': self.total_flops,
            'dense_flops': self.dense_flops,
            'flops_ratio': self.flops_ratio,
            'total_power': self.total_power,
            'params_ratio': self.params_ratio,
            'block_shape': self.block_shape,
            'included': self.included,
        }


def cost_report(costs: Sequence[LayerCost], alphas: Alphas, shape: BlockShape, beta: float = 1.0) -> CostReport:
    """Per-layer FLOPs and power at the given ratios.

    Entries outside the power model (attention products and linear layers
    whose dims the block shape does not divide) report ``power: None``.
    """
    alphas = align_alphas(costs, alphas)
    rows = []
    total_power = 0.0
    params_kept = params_total = 0
    for c, a in zip(costs, alphas):
        power = None
        if c.prunable and shape.divides(c.K, c.N):
            power = beta * layer_power(c, a, shape)
            total_power += power
        if c.prunable:
            params_total += c.N * c.K
            params_kept += c.kept_blocks(a, shape) * shape.area if a > 0 else c.N * c.K
        rows.append({'id': c.layer_id, 'kind': c.kind, 'alpha': a,
                     'flops': layer_flops(c, a, shape), 'power': power})
    return CostReport(
        layers=rows,
        total_flops=sum(r['flops'] for r in rows),
        dense_flops=sum(c.flops_dense for c in costs),
        total_power=total_power,
        params_ratio=params_kept / params_total if params_total else 1.0,
        block_shape=str(shape),
    )


def layer_costs_for(config: ToyViTConfig, batch_granularity: int = 1, b_m: int = 1,
                    p_m: float = 1.0) -> List[LayerCost]:
    """Cost entries of a ToyViT in forward order, for ``batch_granularity`` images."""
    if batch_granularity < 1:
        raise PreconditionError("batch_granularity must be at least 1")
    g, t = batch_granularity, config.num_tokens
    heads, dh = config.num_heads, config.head_dim
    dims = layer_dims(config)

    def linear(lid, m):
        k, n = dims[lid]
        return LayerCost(lid, m, n, k, b_m, p_m)

    costs = [linear('patch_embed', g * t)]
    for d in range(config.depth):
        p = f'block{d}'
        costs.append(linear(f'{p}.attn.qkv', g * t))
        costs.append(LayerCost(f'{p}.attn.scores', g * heads * t, t, dh, b_m, p_m, kind='attention'))
        costs.append(LayerCost(f'{p}.attn.context', g * heads * t, dh, t, b_m, p_m, kind='attention'))
        costs.append(linear(f'{p}.attn.proj', g * t))
        costs.append(linear(f'{p}.mlp.fc1', g * t))
        costs.append(linear(f'{p}.mlp.fc2', g * t))
    costs.append(linear('head', g))
    return costs


def vit_costs(embed_dim: int, num_heads: int, depth: int, mlp_ratio: float = 4.0,
              num_classes: int = 1000, image_size: int = 224, patch: int = 16,
              in_chans: int = 3, cls_token: bool = True) -> List[LayerCost]:
    """Per-image GEMM entries of a standard ViT/DeiT classifier."""
    if image_size % patch:
        raise PreconditionError(f"image_size {image_size} not divisible by patch {patch}")
    patches = (image_size // patch) ** 2
    t = patches + (1 if cls_token else 0)
    hidden = int(mlp_ratio * embed_dim)
    dh = embed_dim // num_heads
    costs = [LayerCost('patch_embed', patches, embed_dim, in_chans * patch * patch)]
    for d in range(depth):
        p = f'block{d}'
        costs += [
            LayerCost(f'{p}.attn.qkv', t, 3 * embed_dim, embed_dim),
            LayerCost(f'{p}.attn.scores', num_heads * t, t, dh, kind='attention'),
            LayerCost(f'{p}.attn.context', num_heads * t, dh, t, kind='attention'),
            LayerCost(f'{p}.attn.proj', t, embed_dim, embed_dim),
            LayerCost(f'{p}.mlp.fc1', t, hidden, embed_dim),
            LayerCost(f'{p}.mlp.fc2', t, embed_dim, hidden),
        ]
    costs.append(LayerCost('head', 1, num_classes, embed_dim))
    return costs


def named_arch_flops(arch: str, image_size: int = 224, patch: int = 16,
                     linear_alpha: float = 0.0) -> int:
    """Analytic FLOPs of a named architecture, one FLOP per multiply-accumulate.

    ``linear_alpha`` removes that fraction of every linear layer's work
    (attention products stay dense). Counted: the entries in
    ``FLOPS_INCLUSION``; layer norms, softmax, GELU and residual adds are not.
    """
    if arch not in NAMED_ARCHS:
        raise PreconditionError(f"unknown architecture {arch!r}; expected one of {sorted(NAMED_ARCHS)}")
    _check_alpha(linear_alpha, arch)
    costs = vit_costs(**NAMED_ARCHS[arch], image_size=image_size, patch=patch)
    total = 0.0
    for c in costs:
        total += c.macs * ((1.0 - linear_alpha) if c.prunable else 1.0)
    return int(round(total))
