"""Latent reconstruction objectives and the inter-patch similarity regulariser.

Every loss accepts single-image (n x d) or batched (B x n x d) latents.
Batched inputs are handled image by image along the leading axis and then
averaged, so contrastive negatives never cross images.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.errors import ConfigurationError, DimensionError
from app.ndtensor import ops
from app.ndtensor.tensor import Tensor
from app.schemas.config import LossConfig, LossKind

DIRECT_KINDS = ("L2", "L1", "Huber")


def _check_pair(pred: Tensor, target: Tensor, what: str) -> None:
    if pred.shape != target.shape:
        raise DimensionError(f"{what}: prediction shape {pred.shape} does not match target shape {target.shape}")


def recon_direct(pred, target, kind: LossKind = "L2", delta: float = 1.0) -> Tensor:
    """Mean over target patches of the per-patch L2, L1 or Huber distance.

    ``L2`` is the squared Euclidean distance, ``L1`` the absolute distance
    and ``Huber`` is ``0.5 * L2`` below ``delta**2`` and
    ``delta * (L1 - delta / 2)`` above it.

    Raises:
        DimensionError: If the shapes differ.
        ConfigurationError: If ``kind`` is not a direct loss or ``delta <= 0``.
    """
    pred, target = ops.as_tensor(pred), ops.as_tensor(target)
    _check_pair(pred, target, "recon_direct")
    if kind not in DIRECT_KINDS:
        raise ConfigurationError(f"recon_direct supports {DIRECT_KINDS}, got '{kind}'", key="loss.kind")
    if delta <= 0:
        raise ConfigurationError(f"Huber delta must be positive, got {delta}", key="loss.delta")

    residual = ops.sub(pred, target)
    squared = ops.sum(ops.square(residual), axis=-1)
    if kind == "L2":
        return ops.mean(squared)
    absolute = ops.sum(ops.abs(residual), axis=-1)
    if kind == "L1":
        return ops.mean(absolute)

    quadratic = (squared.data < delta * delta).astype(squared.dtype)
    inner = ops.mul(ops.mul(squared, 0.5), quadratic)
    outer = ops.mul(ops.mul(ops.sub(absolute, 0.5 * delta), delta), 1.0 - quadratic)
    return ops.mean(ops.add(inner, outer))


def patch_disc(pred, target, tau: float = 0.1, sign: str = "negated") -> Tensor:
    """Per-image patch discrimination (InfoNCE over the target set).

    For each target k the positive is ``z_k`` and the candidates are all
    targets of the same image::

        -tau * log( exp(s * sim(p_k, z_k) / tau) / sum_l exp(s * sim(p_k, z_l) / tau) )

    with ``sim`` the cosine similarity. ``sign="negated"`` uses ``s = -1``,
    ``sign="conventional"`` uses ``s = +1``.

    Raises:
        ConfigurationError: If there are fewer than 2 targets or ``tau <= 0``.
        DimensionError: If the shapes differ.
        DegenerateVectorError: If a latent has zero norm.
    """
    pred, target = ops.as_tensor(pred), ops.as_tensor(target)
    _check_pair(pred, target, "patch_disc")
    if pred.ndim < 2 or pred.shape[-2] < 2:
        raise ConfigurationError(f"patch_disc needs at least 2 target patches, got shape {pred.shape}")
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}", key="loss.tau")
    if sign not in ("negated", "conventional"):
        raise ConfigurationError(f"unknown InfoNCE sign '{sign}'", key="loss.infonce_sign")

    scale = (-1.0 if sign == "negated" else 1.0) / tau
    logits = ops.mul(ops.pairwise_cosine(pred, target), scale)
    eye = np.eye(pred.shape[-2], dtype=logits.dtype)
    positive = ops.sum(ops.mul(logits, eye), axis=-1)
    log_prob = ops.sub(positive, ops.logsumexp(logits, axis=-1))
    return ops.mul(ops.mean(log_prob), -tau)


def mean_pair_cos(latents) -> Tensor:
    """Mean cosine similarity over ordered pairs i != j (one value per image).

    Raises:
        ConfigurationError: If there are fewer than 2 rows.
    """
    latents = ops.as_tensor(latents)
    count = latents.shape[-2]
    if count < 2:
        raise ConfigurationError(f"mean pairwise cosine needs at least 2 rows, got {count}")
    gram = ops.pairwise_cosine(latents, latents)
    off_diagonal = 1.0 - np.eye(count, dtype=gram.dtype)
    total = ops.sum(ops.sum(ops.mul(gram, off_diagonal), axis=-1), axis=-1)
    return ops.mul(total, 1.0 / (count * (count - 1)))


def sim_regularizer(visible, predicted, gamma: float) -> Tensor:
    """``(gamma - meanPairCos(Ẑ_T))^2 + (gamma - meanPairCos(Z_V))^2``, batch-averaged.

    Raises:
        ConfigurationError: If either set has fewer than 2 rows.
    """
    visible, predicted = ops.as_tensor(visible), ops.as_tensor(predicted)
    if visible.shape[-2] < 2 or predicted.shape[-2] < 2:
        raise ConfigurationError(
            f"similarity constraint needs >= 2 visible and target rows, got {visible.shape} and {predicted.shape}"
        )
    gap_pred = ops.square(ops.sub(gamma, mean_pair_cos(predicted)))
    gap_visible = ops.square(ops.sub(gamma, mean_pair_cos(visible)))
    return ops.mean(ops.add(gap_pred, gap_visible))


def gamma_schedule(step: int, total_steps: int, gamma_start: float = 0.75, gamma_end: float = 0.25) -> float:
    """Cosine schedule of the similarity target from ``gamma_start`` to ``gamma_end``."""
    if total_steps <= 0:
        return gamma_end
    progress = min(max(step / total_steps, 0.0), 1.0)
    return gamma_end + 0.5 * (gamma_start - gamma_end) * (1.0 + math.cos(math.pi * progress))


@dataclass
class LossTerms:
    """Scalar loss and its parts. ``reg`` is None when the regulariser is off."""

    total: Tensor
    recon: Tensor
    reg: Optional[Tensor]
    gamma: float


def reconstruction(pred, target, cfg: LossConfig) -> Tensor:
    if cfg.kind == "PatchDisc":
        return patch_disc(pred, target, cfg.tau, cfg.infonce_sign)
    return recon_direct(pred, target, cfg.kind, cfg.delta)


def loss_terms(pred, target, visible, cfg: LossConfig, step: int, total_steps: int) -> LossTerms:
    """Reconstruction term plus the weighted similarity regulariser."""
    gamma = gamma_schedule(step, total_steps, cfg.gamma_start, cfg.gamma_end)
    recon = reconstruction(pred, target, cfg)
    if cfg.reg_weight == 0.0:
        return LossTerms(total=recon, recon=recon, reg=None, gamma=gamma)
    reg = sim_regularizer(visible, pred, gamma)
    return LossTerms(total=ops.add(recon, ops.mul(reg, cfg.reg_weight)), recon=recon, reg=reg, gamma=gamma)


def total_loss(pred, target, visible, cfg: LossConfig, step: int, total_steps: int) -> Tensor:
    """Scalar training objective, see :func:`loss_terms`."""
    return loss_terms(pred, target, visible, cfg, step, total_steps).total
