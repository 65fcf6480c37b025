"""Pre-LN transformer blocks shared by the encoders and decoders.

All functions take batched ``B x n x d`` tensors and a name -> tensor
weight mapping produced by :meth:`ParameterSet.bind`.
"""

import math
from typing import List, Optional

import numpy as np

from app.models.base import ParameterSet, Weights, init_linear, init_norm, linear, norm
from app.ndtensor import ops
from app.ndtensor.tensor import Tensor


def init_self_attention_block(
    params: ParameterSet, prefix: str, dim: int, mlp_ratio: int, rng, std: float, dtype
) -> None:
    init_norm(params, f"{prefix}.norm1", dim, dtype)
    init_linear(params, f"{prefix}.attn.qkv", dim, 3 * dim, rng, std, dtype)
    init_linear(params, f"{prefix}.attn.proj", dim, dim, rng, std, dtype)
    init_norm(params, f"{prefix}.norm2", dim, dtype)
    init_linear(params, f"{prefix}.mlp.fc1", dim, mlp_ratio * dim, rng, std, dtype)
    init_linear(params, f"{prefix}.mlp.fc2", mlp_ratio * dim, dim, rng, std, dtype)


def init_cross_attention_block(
    params: ParameterSet, prefix: str, dim: int, mlp_ratio: int, rng, std: float, dtype
) -> None:
    init_norm(params, f"{prefix}.norm1", dim, dtype)
    init_linear(params, f"{prefix}.self_attn.qkv", dim, 3 * dim, rng, std, dtype)
    init_linear(params, f"{prefix}.self_attn.proj", dim, dim, rng, std, dtype)
    init_norm(params, f"{prefix}.norm2", dim, dtype)
    init_norm(params, f"{prefix}.norm_ctx", dim, dtype)
    init_linear(params, f"{prefix}.cross_attn.q", dim, dim, rng, std, dtype)
    init_linear(params, f"{prefix}.cross_attn.kv", dim, 2 * dim, rng, std, dtype)
    init_linear(params, f"{prefix}.cross_attn.proj", dim, dim, rng, std, dtype)
    init_norm(params, f"{prefix}.norm3", dim, dtype)
    init_linear(params, f"{prefix}.mlp.fc1", dim, mlp_ratio * dim, rng, std, dtype)
    init_linear(params, f"{prefix}.mlp.fc2", mlp_ratio * dim, dim, rng, std, dtype)


def self_attention_block_size(dim: int, mlp_ratio: int) -> int:
    hidden = mlp_ratio * dim
    return 4 * dim + (dim * 3 * dim + 3 * dim) + (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)


def cross_attention_block_size(dim: int, mlp_ratio: int) -> int:
    return self_attention_block_size(dim, mlp_ratio) + 2 * dim + (dim * dim + dim) + (dim * 2 * dim + 2 * dim) + (dim * dim + dim) + 2 * dim


def _split_heads(x: Tensor, heads: int) -> Tensor:
    batch, length, dim = x.shape
    x = ops.reshape(x, (batch, length, heads, dim // heads))
    return ops.transpose(x, (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    batch, heads, length, width = x.shape
    x = ops.transpose(x, (0, 2, 1, 3))
    return ops.reshape(x, (batch, length, heads * width))


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention, 1/sqrt(d/heads) scaling."""
    scale = 1.0 / math.sqrt(q.shape[-1] // heads)
    q, k, v = (_split_heads(t, heads) for t in (q, k, v))
    scores = ops.mul(ops.matmul(q, ops.swap_last(k)), scale)
    return _merge_heads(ops.matmul(ops.softmax(scores, axis=-1), v))


def mlp(x: Tensor, weights: Weights, prefix: str) -> Tensor:
    hidden = ops.gelu(linear(x, weights, f"{prefix}.fc1"))
    return linear(hidden, weights, f"{prefix}.fc2")


def self_attention(x: Tensor, weights: Weights, prefix: str, heads: int) -> Tensor:
    dim = x.shape[-1]
    qkv = linear(x, weights, f"{prefix}.qkv")
    q, k, v = (ops.narrow(qkv, -1, i * dim, dim) for i in range(3))
    return linear(attend(q, k, v, heads), weights, f"{prefix}.proj")


def cross_attention(queries: Tensor, context: Tensor, weights: Weights, prefix: str, heads: int) -> Tensor:
    dim = queries.shape[-1]
    q = linear(queries, weights, f"{prefix}.q")
    kv = linear(context, weights, f"{prefix}.kv")
    k, v = ops.narrow(kv, -1, 0, dim), ops.narrow(kv, -1, dim, dim)
    return linear(attend(q, k, v, heads), weights, f"{prefix}.proj")


def self_attention_block(x: Tensor, weights: Weights, prefix: str, heads: int, eps: float) -> Tensor:
    """LN -> self-attention -> residual -> LN -> MLP -> residual."""
    x = ops.add(x, self_attention(norm(x, weights, f"{prefix}.norm1", eps), weights, f"{prefix}.attn", heads))
    return ops.add(x, mlp(norm(x, weights, f"{prefix}.norm2", eps), weights, f"{prefix}.mlp"))


def cross_attention_block(
    queries: Tensor,
    context: Tensor,
    weights: Weights,
    prefix: str,
    heads: int,
    eps: float,
    block_outputs: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Self-attention over queries, cross-attention into context, then MLP.

    The context stream is read, never written. When ``block_outputs`` is given the
    cross-attention output of this block is appended to it.
    """
    x = ops.add(queries, self_attention(norm(queries, weights, f"{prefix}.norm1", eps), weights, f"{prefix}.self_attn", heads))
    ctx = norm(context, weights, f"{prefix}.norm_ctx", eps)
    crossed = cross_attention(norm(x, weights, f"{prefix}.norm2", eps), ctx, weights, f"{prefix}.cross_attn", heads)
    if block_outputs is not None:
        block_outputs.append(crossed.data.copy())
    x = ops.add(x, crossed)
    return ops.add(x, mlp(norm(x, weights, f"{prefix}.norm3", eps), weights, f"{prefix}.mlp"))
