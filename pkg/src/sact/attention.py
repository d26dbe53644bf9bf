"""Scaled dot-product attention, multi-head composition and the encoder layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, init_matrix, zeros
from .tensor import ContractError, DimensionError, Tensor

MASK_FILL = -1e30


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int

    def __post_init__(self):
        if self.model_dim <= 0 or self.num_heads <= 0:
            raise ValueError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class ProjectionSet:
    """Per-head query/key/value maps stored side by side, plus the output map.

    Columns ``[h*head_dim, (h+1)*head_dim)`` of ``w_p``, ``w_q`` and ``w_r`` are
    head ``h``'s composer (query), selector (key) and amplifier (value) maps.
    """

    w_p: Tensor
    w_q: Tensor
    w_r: Tensor
    w_out: Tensor
    num_heads: int

    @classmethod
    def create(cls, rng: np.random.Generator, config: AttentionConfig, kv_dim: int | None = None):
        d, kv = config.model_dim, kv_dim or config.model_dim
        return cls(
            w_p=init_matrix(rng, d, d),
            w_q=init_matrix(rng, kv, d),
            w_r=init_matrix(rng, kv, d),
            w_out=init_matrix(rng, d, d),
            num_heads=config.num_heads,
        )

    @property
    def head_dim(self) -> int:
        return self.w_p.shape[1] // self.num_heads

    def check(self, query_dim: int, kv_dim: int) -> None:
        hd = self.w_p.shape[1]
        if hd % self.num_heads:
            raise DimensionError(f"projection width {hd} not divisible by {self.num_heads} heads")
        expected = {
            "w_p": (query_dim, hd),
            "w_q": (kv_dim, hd),
            "w_r": (kv_dim, hd),
            "w_out": (hd, self.w_out.shape[1]),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, expected {shape}")


def _mask_bias(mask, t_q: int, t_k: int) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if m.shape != (t_q, t_k):
        raise DimensionError(f"mask shape {m.shape} does not match scores {(t_q, t_k)}")
    if not np.all(m.any(axis=1)):
        raise ContractError("attention mask leaves a query row with no visible key")
    return np.where(m != 0, 0.0, MASK_FILL)


def attention_weights(x_q: Tensor, x_k: Tensor, mask=None) -> Tensor:
    if x_q.shape[1] != x_k.shape[1]:
        raise DimensionError(f"query width {x_q.shape[1]} != key width {x_k.shape[1]}")
    scores = T.scale(T.matmul(x_q, T.transpose(x_k)), 1.0 / np.sqrt(x_q.shape[1]))
    bias = _mask_bias(mask, x_q.shape[0], x_k.shape[0])
    if bias is not None:
        scores = T.add(scores, bias)
    return T.softmax(scores, axis=-1)


def scaled_dot_attention(x_q: Tensor, x_k: Tensor, x_v: Tensor, mask=None) -> Tensor:
    if x_k.shape[0] != x_v.shape[0]:
        raise DimensionError(f"keys have {x_k.shape[0]} rows but values have {x_v.shape[0]}")
    return T.matmul(attention_weights(x_q, x_k, mask), x_v)


def head_weights(x: Tensor, proj: ProjectionSet, mask=None, memory: Tensor | None = None) -> np.ndarray:
    """Attention maps of every head, shape (h, T_q, T_k); diagnostics only."""
    kv = x if memory is None else memory
    proj.check(x.shape[1], kv.shape[1])
    hd = proj.head_dim
    q, k = x.data @ proj.w_p.data, kv.data @ proj.w_q.data
    with T.no_grad():
        return np.stack([
            attention_weights(Tensor(q[:, i * hd:(i + 1) * hd]), Tensor(k[:, i * hd:(i + 1) * hd]), mask).data
            for i in range(proj.num_heads)
        ])


def attention_entropy(weights: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each attention row; masked keys contribute nothing."""
    w = np.asarray(weights)
    safe = np.where(w > 0, w, 1.0)
    return -(w * np.log(safe)).sum(axis=-1)


def multi_head(x: Tensor, proj: ProjectionSet, mask=None, memory: Tensor | None = None) -> Tensor:
    """Self-attention over ``x``, or cross-attention into ``memory`` when given."""
    kv = x if memory is None else memory
    proj.check(x.shape[1], kv.shape[1])
    q = T.matmul(x, proj.w_p)
    k = T.matmul(kv, proj.w_q)
    v = T.matmul(kv, proj.w_r)
    if proj.num_heads == 1:
        heads = scaled_dot_attention(q, k, v, mask)
    else:
        hd = proj.head_dim
        parts = []
        for h in range(proj.num_heads):
            cols = (slice(None), slice(h * hd, (h + 1) * hd))
            parts.append(scaled_dot_attention(q[cols], k[cols], v[cols], mask))
        heads = T.concat(parts, axis=1)
    return T.matmul(heads, proj.w_out)


@dataclass
class FeedForward:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, inner: int | None = None):
        inner = inner or 4 * dim
        return cls(init_matrix(rng, dim, inner), zeros(inner), init_matrix(rng, inner, dim), zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


@dataclass
class EncoderLayer:
    norm_attn: LayerNorm
    attn: ProjectionSet
    norm_ffn: LayerNorm
    ffn: FeedForward

    @classmethod
    def create(cls, rng: np.random.Generator, config: AttentionConfig):
        d = config.model_dim
        return cls(LayerNorm.create(d), ProjectionSet.create(rng, config), LayerNorm.create(d), FeedForward.create(rng, d))


def encoder_layer(x: Tensor, layer: EncoderLayer, mask=None) -> Tensor:
    x = T.add(x, multi_head(layer.norm_attn(x), layer.attn, mask))
    return T.add(x, layer.ffn(layer.norm_ffn(x)))
