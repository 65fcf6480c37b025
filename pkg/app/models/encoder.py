from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.errors import ConfigurationError, DimensionError
from app.models.base import (
    ParameterBundle,
    ParameterSet,
    Weights,
    as_batch,
    lift_positions,
    linear,
    position_table,
    unbatch,
    xavier_uniform,
)
from app.models.transformer import (
    init_self_attention_block,
    self_attention_block,
    self_attention_block_size,
)
from app.ndtensor import ops
from app.ndtensor.tensor import Tensor
from app.schemas.config import ModelConfig


@dataclass
class EncoderParams(ParameterBundle):
    """ViT encoder parameters.

    Attributes:
        patch_dim: Flattened patch width P*P*C.
        dim: Latent width d.
        depth: Number of transformer blocks.
        heads: Attention heads per block.
        mlp_ratio: MLP hidden width as a multiple of d.
        eps: Layer-norm epsilon.
    """

    patch_dim: int = 0
    dim: int = 0
    depth: int = 1
    heads: int = 1
    mlp_ratio: int = 4
    eps: float = 1e-6


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> EncoderParams:
    """Initialise an encoder for ``cfg``.

    The patch embedding uses Xavier-uniform (it replaces a convolution);
    every other linear map is truncated-normal(std) with zero bias and
    layer norms start at gain 1, offset 0.
    """
    params = ParameterSet()
    params["patch_embed.weight"] = xavier_uniform(rng, cfg.patch_dim, cfg.dim, dtype)
    params["patch_embed.bias"] = np.zeros(cfg.dim, dtype=dtype)
    for i in range(cfg.depth):
        init_self_attention_block(params, f"blocks.{i}", cfg.dim, cfg.mlp_ratio, rng, cfg.init_std, dtype)
    return EncoderParams(
        params=params,
        patch_dim=cfg.patch_dim,
        dim=cfg.dim,
        depth=cfg.depth,
        heads=cfg.heads,
        mlp_ratio=cfg.mlp_ratio,
        eps=cfg.ln_eps,
    )


def encoder_parameter_count(cfg: ModelConfig) -> int:
    """(P*P*C + 1) * d + depth * block, see :func:`self_attention_block_size`."""
    return (cfg.patch_dim + 1) * cfg.dim + cfg.depth * self_attention_block_size(cfg.dim, cfg.mlp_ratio)


def embed_patches(params: EncoderParams, patches, weights: Optional[Weights] = None) -> Tensor:
    """Patch embedding alone, the depth-0 (pixel-level) representation."""
    weights = weights if weights is not None else params.bind()
    x, lifted = as_batch(patches, params.dtype)
    if x.shape[-1] != params.patch_dim:
        raise DimensionError(
            f"patch width {x.shape[-1]} does not match patch_embed input {params.patch_dim}"
        )
    return unbatch(linear(x, weights, "patch_embed"), lifted)


def encode(
    params: EncoderParams,
    patches,
    positions: np.ndarray,
    weights: Optional[Weights] = None,
    depth: Optional[int] = None,
) -> Tensor:
    """Per-patch latents of a patch sequence.

    Args:
        params: Encoder parameters.
        patches: n x (P*P*C) or B x n x (P*P*C) patch pixels.
        positions: Matching n x 2 or B x n x 2 grid coordinates.
        weights: Bound weights; defaults to constants (no gradient).
        depth: Run only the first ``depth`` blocks.

    Returns:
        Tensor: n x d (or B x n x d) latents in input order.

    Raises:
        DimensionError: If the patch width does not match patch_embed.
        ConfigurationError: If ``depth`` exceeds the encoder depth.
    """
    weights = weights if weights is not None else params.bind()
    depth = params.depth if depth is None else depth
    if depth > params.depth:
        raise ConfigurationError(f"requested depth {depth} exceeds encoder depth {params.depth}")
    x, lifted = as_batch(patches, params.dtype)
    if x.shape[-1] != params.patch_dim:
        raise DimensionError(
            f"patch width {x.shape[-1]} does not match patch_embed input {params.patch_dim}"
        )
    pos = lift_positions(position_table(positions, params.dim, params.dtype), x.shape[0])
    h = ops.add(linear(x, weights, "patch_embed"), pos)
    for i in range(depth):
        h = self_attention_block(h, weights, f"blocks.{i}", params.heads, params.eps)
    return unbatch(h, lifted)
