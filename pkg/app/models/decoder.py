"""Decoders g: predict target latents from visible latents and positions.

Two families share the mask token and the linear output head:

* ``self_attention``: visible and mask tokens form one sequence that runs
  through self-attention blocks; only the target rows reach the head.
* ``cross_attention``: the mask tokens are the only stream that is
  updated; each block cross-attends into the (fixed) visible context.
"""

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from app.errors import ConfigurationError, ContractError, DimensionError
from app.models.base import (
    ParameterBundle,
    ParameterSet,
    Weights,
    as_batch,
    init_linear,
    lift_positions,
    linear,
    trunc_normal,
    unbatch,
)
from app.models.projector import ProjectorParams, project
from app.models.transformer import (
    cross_attention_block,
    cross_attention_block_size,
    init_cross_attention_block,
    init_self_attention_block,
    self_attention_block,
    self_attention_block_size,
)
from app.ndtensor import ops
from app.ndtensor.tensor import Tensor
from app.schemas.config import DecoderKind, ModelConfig


@dataclass
class DecoderParams(ParameterBundle):
    """Decoder parameters: ``mask_token``, ``blocks.{i}.*`` and ``head.*``."""

    kind: DecoderKind = "self_attention"
    dim: int = 0
    depth: int = 1
    heads: int = 1
    mlp_ratio: int = 4
    eps: float = 1e-6
    visual_cues: bool = False


def init_decoder(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> DecoderParams:
    """Initialise a decoder of ``cfg.decoder_kind`` with ``cfg.decoder_depth`` blocks.

    Raises:
        ConfigurationError: If the decoder depth is below 1.
    """
    if cfg.decoder_depth < 1:
        raise ConfigurationError(f"decoder depth must be >= 1, got {cfg.decoder_depth}", key="model.decoder_depth")
    params = ParameterSet()
    params["mask_token"] = trunc_normal(rng, (cfg.dim,), cfg.init_std, dtype)
    init_block = init_self_attention_block if cfg.decoder_kind == "self_attention" else init_cross_attention_block
    for i in range(cfg.decoder_depth):
        init_block(params, f"blocks.{i}", cfg.dim, cfg.mlp_ratio, rng, cfg.init_std, dtype)
    init_linear(params, "head", cfg.dim, cfg.dim, rng, cfg.init_std, dtype)
    return DecoderParams(
        params=params,
        kind=cfg.decoder_kind,
        dim=cfg.dim,
        depth=cfg.decoder_depth,
        heads=cfg.heads,
        mlp_ratio=cfg.mlp_ratio,
        eps=cfg.ln_eps,
        visual_cues=cfg.visual_cues,
    )


def decoder_parameter_count(cfg: ModelConfig) -> int:
    if cfg.decoder_kind == "self_attention":
        block = self_attention_block_size(cfg.dim, cfg.mlp_ratio)
    else:
        block = cross_attention_block_size(cfg.dim, cfg.mlp_ratio)
    return cfg.dim + cfg.decoder_depth * block + cfg.dim * cfg.dim + cfg.dim


def visual_cue_weights(target_pos, visible_pos) -> Tensor:
    """Softmax over the visible axis of P_T P_V^T / sqrt(d).

    Rows are non-negative and sum to one, so each blend is a convex
    combination of visible latents.
    """
    target_pos, visible_pos = ops.as_tensor(target_pos), ops.as_tensor(visible_pos)
    scale = 1.0 / math.sqrt(target_pos.shape[-1])
    scores = ops.mul(ops.matmul(target_pos, ops.swap_last(visible_pos)), scale)
    return ops.softmax(scores, axis=-1)


def init_mask_tokens(mask_token, target_pos, visible_pos, visible_latents) -> Tensor:
    """Visual-cue mask tokens ``m + p_t + softmax(P_T P_V^T) Z_V``.

    Args:
        mask_token: Learnable token m of width d.
        target_pos: |T| x d (or B x |T| x d) target position embeddings.
        visible_pos: |V| x d (or batched) visible position embeddings.
        visible_latents: |V| x d (or batched) latents Z_V.

    Returns:
        Tensor: One initialised query per target position.

    Raises:
        ConfigurationError: If there are no visible patches.
        DimensionError: If the embedding widths disagree.
    """
    mask_token, target_pos = ops.as_tensor(mask_token), ops.as_tensor(target_pos)
    visible_pos, visible_latents = ops.as_tensor(visible_pos), ops.as_tensor(visible_latents)
    if visible_pos.shape[-2] == 0 or visible_latents.shape[-2] == 0:
        raise ConfigurationError("visual-cue mask tokens need at least one visible patch")
    widths = {mask_token.shape[-1], target_pos.shape[-1], visible_pos.shape[-1], visible_latents.shape[-1]}
    if len(widths) != 1:
        raise DimensionError(
            f"embedding widths disagree: m {mask_token.shape}, P_T {target_pos.shape}, "
            f"P_V {visible_pos.shape}, Z_V {visible_latents.shape}"
        )
    blend = ops.matmul(visual_cue_weights(target_pos, visible_pos), visible_latents)
    return ops.add(ops.add(blend, target_pos), mask_token)


def _queries(params: DecoderParams, weights: Weights, target_pos: Tensor, visible_pos: Tensor, context: Tensor) -> Tensor:
    if params.visual_cues:
        return init_mask_tokens(weights["mask_token"], target_pos, visible_pos, context)
    return ops.add(target_pos, weights["mask_token"])


def _check_kind(params: DecoderParams, kind: DecoderKind) -> None:
    if params.kind != kind:
        raise ContractError(f"decoder is '{params.kind}', cannot run it as '{kind}'")


def _constant(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor) and (value.requires_grad or value.dtype == like.dtype):
        return value
    data = value.data if isinstance(value, Tensor) else value
    return Tensor(np.asarray(data, dtype=like.dtype))


def _embeddings(latents, visible_pos, target_pos, dtype):
    z, lifted = as_batch(latents, dtype)
    batch = z.shape[0]
    p_v = lift_positions(_constant(visible_pos, z), batch)
    p_t = lift_positions(_constant(target_pos, z), batch)
    if p_v.shape != z.shape:
        raise DimensionError(f"visible positions {p_v.shape} do not match visible latents {z.shape}")
    if p_t.shape[-1] != z.shape[-1]:
        raise DimensionError(f"target positions {p_t.shape} do not match latent width {z.shape[-1]}")
    return z, p_v, p_t, lifted


def decode_self_attn(
    params: DecoderParams,
    visible_latents,
    visible_pos,
    target_pos,
    weights: Optional[Weights] = None,
    projector: Optional[ProjectorParams] = None,
    projector_weights: Optional[Weights] = None,
) -> Tensor:
    """Predict target latents with a joint self-attention sequence.

    The sequence ``[Z_V + P_V ; m + P_T]`` runs through every block and
    the head maps the target rows, in ``target_pos`` order, to Ẑ_T.

    Raises:
        ContractError: If the decoder is not a self-attention decoder.
    """
    _check_kind(params, "self_attention")
    weights = weights if weights is not None else params.bind()
    z, p_v, p_t, lifted = _embeddings(visible_latents, visible_pos, target_pos, params.dtype)
    if projector is not None:
        z = project(projector, z, projector_weights)
    queries = _queries(params, weights, p_t, p_v, z)
    n_visible = z.shape[1]
    x = ops.concat([ops.add(z, p_v), queries], axis=1)
    for i in range(params.depth):
        x = self_attention_block(x, weights, f"blocks.{i}", params.heads, params.eps)
    x = ops.narrow(x, 1, n_visible, p_t.shape[1])
    return unbatch(linear(x, weights, "head"), lifted)


def decode_cross_attn(
    params: DecoderParams,
    visible_latents,
    visible_pos,
    target_pos,
    weights: Optional[Weights] = None,
    projector: Optional[ProjectorParams] = None,
    projector_weights: Optional[Weights] = None,
    block_outputs: Optional[List[np.ndarray]] = None,
) -> Tensor:
    """Predict target latents with a query-only stream.

    Keys and values at every block come from ``Z_V + P_V`` (after the
    projector when one is given); the visible context is never updated.

    Args:
        params: Cross-attention decoder parameters.
        visible_latents: |V| x d (or B x |V| x d) latents Z_V.
        visible_pos: Matching position embeddings P_V.
        target_pos: |T| x d (or batched) position embeddings P_T.
        weights: Bound decoder weights; constants when omitted.
        projector: Optional latent projector applied to Z_V first.
        projector_weights: Bound projector weights.
        block_outputs: Receives each block's cross-attention output.

    Returns:
        Tensor: Ẑ_T in ``target_pos`` order.

    Raises:
        ContractError: If the decoder is not a cross-attention decoder.
    """
    _check_kind(params, "cross_attention")
    weights = weights if weights is not None else params.bind()
    z, p_v, p_t, lifted = _embeddings(visible_latents, visible_pos, target_pos, params.dtype)
    if projector is not None:
        z = project(projector, z, projector_weights)
    context = ops.add(z, p_v)
    x = _queries(params, weights, p_t, p_v, z)
    for i in range(params.depth):
        x = cross_attention_block(x, context, weights, f"blocks.{i}", params.heads, params.eps, block_outputs)
    return unbatch(linear(x, weights, "head"), lifted)


def decode(params: DecoderParams, visible_latents, visible_pos, target_pos, weights=None, projector=None, projector_weights=None) -> Tensor:
    """Dispatch on the decoder kind."""
    if params.kind == "cross_attention":
        return decode_cross_attn(params, visible_latents, visible_pos, target_pos, weights, projector, projector_weights)
    return decode_self_attn(params, visible_latents, visible_pos, target_pos, weights, projector, projector_weights)
