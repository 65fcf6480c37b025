from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.errors import DimensionError
from app.models.base import (
    ParameterBundle,
    ParameterSet,
    Weights,
    as_batch,
    init_linear,
    init_norm,
    linear,
    norm,
    unbatch,
)
from app.ndtensor import ops
from app.ndtensor.tensor import Tensor
from app.schemas.config import ModelConfig


@dataclass
class ProjectorParams(ParameterBundle):
    """Three-layer MLP h: d -> hidden -> hidden -> d with LN + GELU between."""

    dim: int = 0
    hidden: int = 0
    eps: float = 1e-6


def init_projector(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ProjectorParams:
    params = ParameterSet()
    hidden = cfg.hidden_projector
    init_linear(params, "fc1", cfg.dim, hidden, rng, cfg.init_std, dtype)
    init_norm(params, "norm1", hidden, dtype)
    init_linear(params, "fc2", hidden, hidden, rng, cfg.init_std, dtype)
    init_norm(params, "norm2", hidden, dtype)
    init_linear(params, "fc3", hidden, cfg.dim, rng, cfg.init_std, dtype)
    return ProjectorParams(params=params, dim=cfg.dim, hidden=hidden, eps=cfg.ln_eps)


def projector_parameter_count(cfg: ModelConfig) -> int:
    d, h = cfg.dim, cfg.hidden_projector
    return (d * h + h) + 2 * h + (h * h + h) + 2 * h + (h * d + d)


def project(params: ProjectorParams, latents, weights: Optional[Weights] = None) -> Tensor:
    """Row-wise projection of visible latents; rows never mix.

    Raises:
        DimensionError: If the latent width is not d.
    """
    weights = weights if weights is not None else params.bind()
    x, lifted = as_batch(latents, params.dtype)
    if x.shape[-1] != params.dim:
        raise DimensionError(f"projector expects width {params.dim}, got shape {x.shape}")
    x = ops.gelu(norm(linear(x, weights, "fc1"), weights, "norm1", params.eps))
    x = ops.gelu(norm(linear(x, weights, "fc2"), weights, "norm2", params.eps))
    return unbatch(linear(x, weights, "fc3"), lifted)
