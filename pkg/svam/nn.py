"""
Layer building blocks on top of tensor_autograd: parameter containers, linear
and normalization layers, multi-head attention, and the factorized
spatio-temporal transformer block used by the denoiser and the decouplers.
"""

import hashlib
import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from svam import tensor_autograd as ta
from svam.errors import CheckpointMismatchError, ShapeError
from svam.tensor_autograd import Tensor


class Parameter(Tensor):
    """Leaf tensor that the optimizer updates."""

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for param in self.parameters().values():
            param.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = self.parameters()
        missing = sorted(set(params) - set(state))
        if missing:
            raise CheckpointMismatchError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
        for name, param in params.items():
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ShapeError(f"load {name}", param.shape, value.shape)
            param.data = value.astype(param.data.dtype)

    def checksum(self) -> str:
        """Digest of every parameter value; stable across processes on one platform."""
        digest = hashlib.blake2b(digest_size=16)
        for name, param in sorted(self.named_parameters()):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(param.data, dtype=np.float32).tobytes())
        return digest.hexdigest()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, init_scale: float = 1.0):
        bound = init_scale / math.sqrt(in_features)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ta.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ta.layer_norm(x) * self.gamma + self.beta


class FeedForward(Module):
    def __init__(self, dim: int, ratio: int, rng: np.random.Generator):
        self.up = Linear(dim, dim * ratio, rng)
        self.down = Linear(dim * ratio, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(ta.gelu(self.up(x)))


class MultiHeadAttention(Module):
    """
    Multi-head attention over the second-to-last axis.

    With `context` omitted this is self-attention; otherwise queries come from
    `x` and keys/values from `context` (width `context_dim`).
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, context_dim: Optional[int] = None):
        if dim % heads:
            raise ShapeError("MultiHeadAttention", f"width divisible by {heads} heads", dim)
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        # no bias: softmax cancels a per-query constant
        self.k = Linear(context_dim or dim, dim, rng, bias=False)
        self.v = Linear(context_dim or dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self._last_weights: Optional[np.ndarray] = None

    def _split(self, x: Tensor) -> Tensor:
        lead, n, d = x.shape[:-2], x.shape[-2], x.shape[-1]
        x = ta.reshape(x, lead + (n, self.heads, d // self.heads))
        k = len(lead)
        return ta.permute(x, list(range(k)) + [k + 1, k, k + 2])

    def _merge(self, x: Tensor) -> Tensor:
        lead, h, n, dh = x.shape[:-3], x.shape[-3], x.shape[-2], x.shape[-1]
        k = len(lead)
        x = ta.permute(x, list(range(k)) + [k + 1, k, k + 2])
        return ta.reshape(x, lead + (n, h * dh))

    def forward(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        source = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(source)), self._split(self.v(source))
        out, weights = ta.attention_with_weights(q, k, v)
        self._last_weights = weights.data
        return self.out(self._merge(out))

    @property
    def last_weights(self) -> Optional[np.ndarray]:
        """Attention weights of the latest call, shape (..., heads, n_q, n_k)."""
        return self._last_weights


class TransformerLayer(Module):
    """Pre-norm self-attention + MLP, attending over the second-to-last axis."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm_mlp = LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm_attn(x))
        return x + self.mlp(self.norm_mlp(x))


class FactorizedBlock(Module):
    """
    Spatial attention over the cells of each frame, then temporal attention over
    the frames of each cell. Input and output are (B, T, N, D) token volumes.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.spatial = TransformerLayer(dim, heads, mlp_ratio, rng)
        self.temporal = TransformerLayer(dim, heads, mlp_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = self.spatial(x)
        x = ta.permute(x, (0, 2, 1, 3))
        x = self.temporal(x)
        return ta.permute(x, (0, 2, 1, 3))


def sinusoidal_embedding(steps: Sequence[float], dim: int) -> np.ndarray:
    """(len(steps), dim) sin/cos embedding of diffusion step indices."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = steps * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


def volume_to_tokens(x: Tensor) -> Tensor:
    """(B, T, C, h, w) -> (B, T, h*w, C)."""
    b, t, c, h, w = x.shape
    return ta.swap_last(ta.reshape(x, (b, t, c, h * w)))


def tokens_to_volume(x: Tensor, h: int, w: int) -> Tensor:
    """(B, T, h*w, C) -> (B, T, C, h, w)."""
    b, t, n, c = x.shape
    if n != h * w:
        raise ShapeError("tokens_to_volume", h * w, n)
    return ta.reshape(ta.swap_last(x), (b, t, c, h, w))


def positional_table(shape: Sequence[int], rng: np.random.Generator, std: float = 0.02) -> Parameter:
    """Learned positional encoding initialized near zero."""
    return Parameter(rng.normal(0.0, std, size=tuple(shape)))


def count_parameters(module: Module) -> int:
    return int(sum(p.data.size for p in module.parameters().values()))


def parameter_groups(module: Module) -> List[str]:
    """Top-level attribute names that own parameters."""
    return sorted({name.split(".")[0] for name in module.parameters()})
