"""
Toy vision transformer with hand-derived forward and backward passes.

Layout (pre-norm, no class token, mean-pooled head):

    patches -> patch_embed -> + pos_embed
    depth x [ x + proj(attn(qkv(norm1(x)))) ; x + fc2(gelu(fc1(norm2(x)))) ]
    mean over tokens -> head -> logits

Linear weights are stored as ``(in, out)`` so a layer computes ``x @ W + b``.
Only the 4*depth + 2 linear weights are prunable; biases, the positional
embedding and layer-norm parameters never are.
"""

import math
import time
from dataclasses import asdict, dataclass, field
from itertools import count
from typing import Dict, List, Optional, Tuple

import numpy as np

from pruning.errors import NonFiniteError, PreconditionError, ShapeError, StaleCacheError, TrainingDivergedError
from pruning.tensor import DTYPE, BlockMask, BlockShape, apply_mask, matmul
from utils.logger import get_logger, log_performance

logger = get_logger('model')

BLOCK_LAYERS = ('attn.qkv', 'attn.proj', 'mlp.fc1', 'mlp.fc2')
LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)

_uids = count()


@dataclass
class ToyViTConfig:
    image_size: int = 16
    patch_size: int = 4
    embed_dim: int = 32
    num_heads: int = 2
    depth: int = 2
    mlp_ratio: float = 2.0
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.embed_dim, self.num_heads, self.num_classes) < 1:
            raise PreconditionError(f"model dimensions must be positive: {self}")
        if self.depth < 0:
            raise PreconditionError("depth must be nonnegative")
        if self.image_size % self.patch_size:
            raise PreconditionError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise PreconditionError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")

    @property
    def num_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ToyViTConfig":
        return cls(**data)


def layer_ids(config: ToyViTConfig) -> List[str]:
    """Prunable layer ids in their fixed order."""
    ids = ['patch_embed']
    for d in range(config.depth):
        ids.extend(f'block{d}.{name}' for name in BLOCK_LAYERS)
    ids.append('head')
    return ids


def layer_dims(config: ToyViTConfig) -> Dict[str, Tuple[int, int]]:
    """``(in, out)`` of every prunable weight."""
    e, h = config.embed_dim, config.hidden_dim
    dims = {'patch_embed': (config.patch_dim, e), 'head': (e, config.num_classes)}
    for d in range(config.depth):
        dims[f'block{d}.attn.qkv'] = (e, 3 * e)
        dims[f'block{d}.attn.proj'] = (e, e)
        dims[f'block{d}.mlp.fc1'] = (e, h)
        dims[f'block{d}.mlp.fc2'] = (h, e)
    return dims


def extra_dims(config: ToyViTConfig) -> Dict[str, Tuple[int, int]]:
    dims = {'pos_embed': (config.num_tokens, config.embed_dim)}
    for d in range(config.depth):
        for norm in ('norm1', 'norm2'):
            dims[f'block{d}.{norm}.gain'] = (1, config.embed_dim)
            dims[f'block{d}.{norm}.shift'] = (1, config.embed_dim)
    return dims


class ParamSet:
    """Ordered weights, biases and non-prunable extras of a ToyViT.

    ``version`` increases on every in-place update so stale forward caches
    can be detected.
    """

    def __init__(self, config: ToyViTConfig, weights: Dict[str, np.ndarray],
                 biases: Dict[str, np.ndarray], extras: Dict[str, np.ndarray]):
        self.config = config
        self.weights = {lid: weights[lid] for lid in layer_ids(config)}
        self.biases = {lid: biases[lid] for lid in layer_ids(config)}
        self.extras = {name: extras[name] for name in extra_dims(config)}
        self.uid = next(_uids)
        self.version = 0
        self.validate()

    def validate(self):
        for lid, (fan_in, fan_out) in layer_dims(self.config).items():
            if self.weights[lid].shape != (fan_in, fan_out):
                raise ShapeError(f"{lid}: weight shape {self.weights[lid].shape} != {(fan_in, fan_out)}")
            if self.biases[lid].shape != (fan_out,):
                raise ShapeError(f"{lid}: bias shape {self.biases[lid].shape} != {(fan_out,)}")
        for name, dims in extra_dims(self.config).items():
            if self.extras[name].shape != dims:
                raise ShapeError(f"{name}: shape {self.extras[name].shape} != {dims}")

    @property
    def layer_ids(self) -> List[str]:
        return list(self.weights)

    @property
    def dtype(self):
        return self.weights['head'].dtype

    def tensors(self) -> Dict[str, np.ndarray]:
        """Flat name -> array mapping in the stable storage order."""
        out = {}
        for lid in self.weights:
            out[f'{lid}.weight'] = self.weights[lid]
            out[f'{lid}.bias'] = self.biases[lid]
        out.update(self.extras)
        return out

    @classmethod
    def from_tensors(cls, config: ToyViTConfig, tensors: Dict[str, np.ndarray]) -> "ParamSet":
        missing = [name for name in _tensor_names(config) if name not in tensors]
        if missing:
            raise ShapeError(f"missing tensors: {', '.join(missing)}")
        weights = {lid: tensors[f'{lid}.weight'] for lid in layer_ids(config)}
        biases = {lid: np.asarray(tensors[f'{lid}.bias']).reshape(-1) for lid in layer_ids(config)}
        extras = {name: tensors[name] for name in extra_dims(config)}
        return cls(config, weights, biases, extras)

    def copy(self) -> "ParamSet":
        return ParamSet(self.config,
                        {k: v.copy() for k, v in self.weights.items()},
                        {k: v.copy() for k, v in self.biases.items()},
                        {k: v.copy() for k, v in self.extras.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(self.config,
                        {k: v.astype(dtype) for k, v in self.weights.items()},
                        {k: v.astype(dtype) for k, v in self.biases.items()},
                        {k: v.astype(dtype) for k, v in self.extras.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet(self.config,
                        {k: np.zeros_like(v) for k, v in self.weights.items()},
                        {k: np.zeros_like(v) for k, v in self.biases.items()},
                        {k: np.zeros_like(v) for k, v in self.extras.items()})

    def arrays(self) -> List[np.ndarray]:
        return list(self.weights.values()) + list(self.biases.values()) + list(self.extras.values())

    def touch(self):
        self.version += 1

    def apply_masks(self, masks: Dict[str, BlockMask], shape: BlockShape):
        for lid, mask in masks.items():
            self.weights[lid][...] = apply_mask(self.weights[lid], mask, shape)
        self.touch()


def _tensor_names(config: ToyViTConfig) -> List[str]:
    names = []
    for lid in layer_ids(config):
        names.extend((f'{lid}.weight', f'{lid}.bias'))
    return names + list(extra_dims(config))


def init_params(config: ToyViTConfig, rng: Optional[np.random.Generator] = None) -> ParamSet:
    """Weights ~ N(0, 1/fan_in), zero biases, unit norm gains."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    weights, biases = {}, {}
    for lid, (fan_in, fan_out) in layer_dims(config).items():
        weights[lid] = (rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)).astype(DTYPE)
        biases[lid] = np.zeros(fan_out, dtype=DTYPE)
    extras = {}
    for name, dims in extra_dims(config).items():
        if name == 'pos_embed':
            extras[name] = (0.02 * rng.standard_normal(dims)).astype(DTYPE)
        elif name.endswith('.gain'):
            extras[name] = np.ones(dims, dtype=DTYPE)
        else:
            extras[name] = np.zeros(dims, dtype=DTYPE)
    return ParamSet(config, weights, biases, extras)


@dataclass
class CalibBatch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 3:
            raise ShapeError(f"inputs must be (n, H, W), got {self.inputs.shape}")
        if len(self.inputs) < 1:
            raise PreconditionError("a batch needs at least one sample")
        if self.labels.shape != (len(self.inputs),):
            raise ShapeError(f"labels shape {self.labels.shape} does not match {len(self.inputs)} inputs")
        if np.any(self.labels < 0):
            raise PreconditionError("labels must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.inputs)

    def subset(self, index) -> "CalibBatch":
        index = np.asarray(index)
        return CalibBatch(self.inputs[index], self.labels[index])


def synth_dataset(num_classes: int, samples_per_class: int, image_size: int, seed: int,
                  test_samples_per_class: Optional[int] = None) -> Tuple[CalibBatch, CalibBatch]:
    """Gaussian-blob images with class-dependent position and grating frequency.

    Class ``c`` places a blob on a circle around the image centre at angle
    ``2*pi*c/num_classes`` and overlays a grating of frequency ``1 + c % 3``
    oriented at ``pi*c/num_classes``. Centres jitter by up to one pixel and
    pixel noise is added.
    """
    if min(num_classes, samples_per_class, image_size) < 1:
        raise PreconditionError("synth_dataset counts must be at least 1")
    if test_samples_per_class is None:
        test_samples_per_class = max(1, samples_per_class // 2)
    rng = np.random.default_rng(seed)
    train = _synth_split(num_classes, samples_per_class, image_size, rng)
    test = _synth_split(num_classes, test_samples_per_class, image_size, rng)
    return train, test


def _synth_split(num_classes: int, per_class: int, image_size: int, rng: np.random.Generator) -> CalibBatch:
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    centre = (image_size - 1) / 2.0
    radius = image_size / 3.0
    sigma = max(image_size / 10.0, 0.75)
    images, labels = [], []
    for c in range(num_classes):
        angle = 2.0 * math.pi * c / num_classes
        cy, cx = centre + radius * math.sin(angle), centre + radius * math.cos(angle)
        freq = 1 + c % 3
        theta = math.pi * c / num_classes
        grating = 0.3 * np.sin(2.0 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) / image_size)
        for _ in range(per_class):
            jy, jx = rng.uniform(-1.0, 1.0, size=2)
            blob = np.exp(-((yy - cy - jy) ** 2 + (xx - cx - jx) ** 2) / (2.0 * sigma ** 2))
            noise = 0.1 * rng.standard_normal((image_size, image_size))
            images.append(blob + grating + noise)
            labels.append(c)
    order = rng.permutation(len(labels))
    inputs = np.stack(images)[order].astype(DTYPE)
    return CalibBatch(inputs, np.asarray(labels, dtype=np.int64)[order])


class LinearExecutor:
    """Runs the linear layers of a forward pass with the exact dense GEMM."""

    def __init__(self, counter=None):
        self.counter = counter

    def linear(self, layer_id: str, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        if self.counter is not None:
            self.counter.add(x.shape[0] * w.shape[0] * w.shape[1])
        return matmul(x, w)

    def attention(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.counter is not None:
            self.counter.add(int(np.prod(a.shape)) * b.shape[-1])
        return np.matmul(a, b)


class BlasExecutor(LinearExecutor):
    """Dense linears through the BLAS GEMM; fast, but rounding follows the BLAS blocking."""

    def linear(self, layer_id: str, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        if self.counter is not None:
            self.counter.add(x.shape[0] * w.shape[0] * w.shape[1])
        return np.matmul(x, w)


@dataclass
class ForwardCache:
    params_uid: int
    params_version: int
    n: int
    patches: np.ndarray = None
    blocks: List[Dict[str, np.ndarray]] = field(default_factory=list)
    pooled: np.ndarray = None


def _linear(executor, params: ParamSet, lid: str, x2d: np.ndarray) -> np.ndarray:
    w = params.weights[lid]
    if x2d.shape[1] != w.shape[0]:
        raise ShapeError(f"{lid}: input width {x2d.shape[1]} does not match weight {w.shape[0]}x{w.shape[1]}")
    return executor.linear(lid, x2d, w) + params.biases[lid]


def _layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + shift, xhat, rstd


def _layer_norm_backward(dy: np.ndarray, xhat: np.ndarray, rstd: np.ndarray, gain: np.ndarray):
    dgain = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0, keepdims=True)
    dshift = dy.reshape(-1, dy.shape[-1]).sum(axis=0, keepdims=True)
    dxhat = dy * gain
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dshift


def _gelu(u: np.ndarray):
    t = np.tanh(GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_grad(u: np.ndarray, t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    n, h, w = images.shape
    g_h, g_w = h // patch_size, w // patch_size
    return (images.reshape(n, g_h, patch_size, g_w, patch_size)
            .transpose(0, 1, 3, 2, 4)
            .reshape(n, g_h * g_w, patch_size * patch_size))


def forward(params: ParamSet, x: CalibBatch, executor: Optional[LinearExecutor] = None
            ) -> Tuple[np.ndarray, ForwardCache]:
    """Logits (n x num_classes) and the cache needed by ``backward``."""
    cfg = params.config
    executor = executor or LinearExecutor()
    if x.inputs.shape[1:] != (cfg.image_size, cfg.image_size):
        raise ShapeError(f"patch_embed: images of shape {x.inputs.shape[1:]} do not match "
                         f"image_size {cfg.image_size}")
    n, t, e = x.n, cfg.num_tokens, cfg.embed_dim
    heads, dh = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    dtype = params.dtype

    cache = ForwardCache(params.uid, params.version, n)
    cache.patches = patchify(x.inputs.astype(dtype), cfg.patch_size).reshape(n * t, cfg.patch_dim)
    h = _linear(executor, params, 'patch_embed', cache.patches).reshape(n, t, e) + params.extras['pos_embed']

    for d in range(cfg.depth):
        p = f'block{d}'
        c = {}
        a, c['xhat1'], c['rstd1'] = _layer_norm(h, params.extras[f'{p}.norm1.gain'], params.extras[f'{p}.norm1.shift'])
        c['a'] = a.reshape(n * t, e)
        qkv = _linear(executor, params, f'{p}.attn.qkv', c['a'])
        qkv = qkv.reshape(n, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = executor.attention(q, k.transpose(0, 1, 3, 2)) * scale
        att = _softmax(scores)
        ctx = executor.attention(att, v)
        c.update(q=q, k=k, v=v, att=att)
        c['ctx'] = ctx.transpose(0, 2, 1, 3).reshape(n * t, e)
        h = h + _linear(executor, params, f'{p}.attn.proj', c['ctx']).reshape(n, t, e)

        m, c['xhat2'], c['rstd2'] = _layer_norm(h, params.extras[f'{p}.norm2.gain'], params.extras[f'{p}.norm2.shift'])
        c['m'] = m.reshape(n * t, e)
        c['u'] = _linear(executor, params, f'{p}.mlp.fc1', c['m'])
        c['g'], c['tanh'] = _gelu(c['u'])
        h = h + _linear(executor, params, f'{p}.mlp.fc2', c['g']).reshape(n, t, e)
        cache.blocks.append(c)

    cache.pooled = h.mean(axis=1)
    logits = _linear(executor, params, 'head', cache.pooled)
    return logits, cache


def backward(params: ParamSet, cache: ForwardCache, loss_grad: np.ndarray) -> ParamSet:
    """Gradients of a scalar loss given ``d loss / d logits``."""
    if cache.params_uid != params.uid or cache.params_version != params.version:
        raise StaleCacheError("forward cache does not belong to the current parameters")
    cfg = params.config
    n, t, e = cache.n, cfg.num_tokens, cfg.embed_dim
    heads, dh = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    dlogits = np.asarray(loss_grad, dtype=params.dtype)
    if dlogits.shape != (n, cfg.num_classes):
        raise ShapeError(f"head: loss gradient shape {dlogits.shape} != {(n, cfg.num_classes)}")

    grads = params.zeros_like()

    def linear_back(lid, x2d, dy2d):
        grads.weights[lid] = matmul(x2d.T, dy2d)
        grads.biases[lid] = dy2d.sum(axis=0)
        return matmul(dy2d, params.weights[lid].T)

    dpooled = linear_back('head', cache.pooled, dlogits)
    dres = np.broadcast_to(dpooled[:, None, :] / t, (n, t, e)).copy()

    for d in reversed(range(cfg.depth)):
        p = f'block{d}'
        c = cache.blocks[d]

        dgel = linear_back(f'{p}.mlp.fc2', c['g'], dres.reshape(n * t, e))
        du = dgel * _gelu_grad(c['u'], c['tanh'])
        dm = linear_back(f'{p}.mlp.fc1', c['m'], du).reshape(n, t, e)
        dx, dgain, dshift = _layer_norm_backward(dm, c['xhat2'], c['rstd2'], params.extras[f'{p}.norm2.gain'])
        grads.extras[f'{p}.norm2.gain'] = dgain
        grads.extras[f'{p}.norm2.shift'] = dshift
        dres = dres + dx

        dctx = linear_back(f'{p}.attn.proj', c['ctx'], dres.reshape(n * t, e))
        dctx = dctx.reshape(n, t, heads, dh).transpose(0, 2, 1, 3)
        datt = np.matmul(dctx, c['v'].transpose(0, 1, 3, 2))
        dv = np.matmul(c['att'].transpose(0, 1, 3, 2), dctx)
        dscores = c['att'] * (datt - (datt * c['att']).sum(axis=-1, keepdims=True)) * scale
        dq = np.matmul(dscores, c['k'])
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), c['q'])
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(n * t, 3 * e)
        da = linear_back(f'{p}.attn.qkv', c['a'], dqkv).reshape(n, t, e)
        dx, dgain, dshift = _layer_norm_backward(da, c['xhat1'], c['rstd1'], params.extras[f'{p}.norm1.gain'])
        grads.extras[f'{p}.norm1.gain'] = dgain
        grads.extras[f'{p}.norm1.shift'] = dshift
        dres = dres + dx

    grads.extras['pos_embed'] = dres.sum(axis=0)
    linear_back('patch_embed', cache.patches, dres.reshape(n * t, e))
    return grads


def scalar_proxy(logits: np.ndarray, labels: Optional[np.ndarray] = None, kind: str = 'ce'
                 ) -> Tuple[float, np.ndarray]:
    """Batch-mean scalar f and ``d f / d logits``.

    ``kind='ce'`` is cross-entropy against ``labels``; ``kind='l2'`` is the
    L2 norm of each logit row (its gradient at a zero row is taken as 0).
    """
    logits = np.asarray(logits)
    n = logits.shape[0]
    if kind == 'ce':
        if labels is None:
            raise PreconditionError("cross-entropy proxy needs labels")
        labels = np.asarray(labels, dtype=np.int64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(shifted).sum(axis=1))
        picked = shifted[np.arange(n), labels]
        value = float((logsum - picked).mean())
        grad = np.exp(shifted - logsum[:, None])
        grad[np.arange(n), labels] -= 1.0
        return value, (grad / n).astype(logits.dtype)
    if kind == 'l2':
        norms = np.sqrt((logits.astype(np.float64) ** 2).sum(axis=1))
        safe = np.where(norms > 0, norms, 1.0)
        grad = np.where(norms[:, None] > 0, logits / safe[:, None], 0.0) / n
        return float(norms.mean()), grad.astype(logits.dtype)
    raise PreconditionError(f"unknown scalar proxy {kind!r}; expected 'ce' or 'l2'")


def loss_and_grads(params: ParamSet, batch: CalibBatch, kind: str = 'ce') -> Tuple[float, ParamSet]:
    logits, cache = forward(params, batch)
    value, dlogits = scalar_proxy(logits, batch.labels, kind)
    return value, backward(params, cache, dlogits)


def per_sample_grads(params: ParamSet, batch: CalibBatch, kind: str = 'ce',
                     layers: Optional[List[str]] = None) -> Dict[str, np.ndarray]:
    """``{layer_id: N x D}`` flattened weight gradients, one row per sample."""
    layers = layers or params.layer_ids
    out = {lid: np.empty((batch.n, params.weights[lid].size), dtype=np.float64) for lid in layers}
    for i in range(batch.n):
        _, grads = loss_and_grads(params, batch.subset([i]), kind)
        for lid in layers:
            out[lid][i] = grads.weights[lid].reshape(-1)
    return out


def predict(params: ParamSet, batch: CalibBatch, executor: Optional[LinearExecutor] = None,
            chunk: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, batch.n, chunk):
        logits, _ = forward(params, batch.subset(np.arange(start, min(start + chunk, batch.n))), executor)
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def accuracy(params: ParamSet, batch: CalibBatch) -> float:
    return float((predict(params, batch) == batch.labels).mean())


def sgd_finetune(params: ParamSet, masks: Optional[Dict[str, BlockMask]], train: CalibBatch,
                 epochs: int, lr: float, momentum: float = 0.9, shape: Optional[BlockShape] = None,
                 batch_size: int = 32, seed: int = 0, kind: str = 'ce',
                 clip_norm: Optional[float] = None) -> ParamSet:
    """Minibatch SGD with momentum; masked blocks are re-zeroed after every step.

    With ``clip_norm`` the gradient is rescaled so its global L2 norm is at
    most ``clip_norm`` before it enters the momentum buffer.
    """
    if masks and shape is None:
        raise PreconditionError("masks need the block shape they were built with")
    if masks:
        for lid, mask in masks.items():
            if lid not in params.weights:
                raise PreconditionError(f"mask given for unknown layer {lid}")
            mask.check_against(params.weights[lid], shape, lid)

    params = params.copy()
    velocity = [np.zeros_like(a) for a in params.arrays()]
    rng = np.random.default_rng(seed)

    last_loss = None
    for epoch in range(epochs):
        start = time.time()
        order = rng.permutation(train.n)
        losses = []
        for step, first in enumerate(range(0, train.n, batch_size)):
            batch = train.subset(order[first:first + batch_size])
            try:
                loss, grads = loss_and_grads(params, batch, kind)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch + 1, step, last_loss) from exc
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch + 1, step, last_loss)
            scale = 1.0
            if clip_norm:
                norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.arrays()))
                if norm > clip_norm:
                    scale = clip_norm / norm
            for p, g, v in zip(params.arrays(), grads.arrays(), velocity):
                v *= momentum
                v += scale * g
                p -= lr * v
            if not all(np.isfinite(p).all() for p in params.arrays()):
                raise TrainingDivergedError(epoch + 1, step, loss)
            last_loss = loss
            if masks:
                for lid, mask in masks.items():
                    params.weights[lid][...] = apply_mask(params.weights[lid], mask, shape)
            params.touch()
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        logger.info(f"epoch {epoch + 1}/{epochs}: loss {mean_loss:.4f}")
        log_performance('sgd_epoch', time.time() - start, {'epoch': epoch + 1, 'loss': mean_loss})
    return params


def inactive_heads(params: ParamSet) -> Dict[str, List[int]]:
    """Heads that contribute nothing but a constant after pruning.

    A head is inactive when its rows of ``attn.proj`` are all zero, or when
    its value columns of ``attn.qkv`` and their bias are all zero.
    """
    cfg = params.config
    e, dh = cfg.embed_dim, cfg.head_dim
    out = {}
    for d in range(cfg.depth):
        qkv = params.weights[f'block{d}.attn.qkv']
        qkv_b = params.biases[f'block{d}.attn.qkv']
        proj = params.weights[f'block{d}.attn.proj']
        dead = []
        for h in range(cfg.num_heads):
            v_cols = slice(2 * e + h * dh, 2 * e + (h + 1) * dh)
            proj_rows = slice(h * dh, (h + 1) * dh)
            if not proj[proj_rows].any() or (not qkv[:, v_cols].any() and not qkv_b[v_cols].any()):
                dead.append(h)
        out[f'block{d}'] = dead
    return out
