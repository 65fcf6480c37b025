"""Target encoder f_T: the three detached strategies plus joint sharing.

Strategies:
    shared: online weights, targets computed on the tape (joint gradients).
        Only the naive baseline uses it; :func:`target_encode` still returns
        detached targets for it.
    standalone: an independently initialised encoder that is never updated.
    shared_stopgrad: aliases the online parameters, no gradient.
    momentum: EMA copy of the online parameters, no gradient.
"""

import logging
from dataclasses import dataclass

import numpy as np

from app.errors import ConfigurationError, ContractError, DimensionError
from app.models.encoder import EncoderParams, embed_patches, encode, init_encoder
from app.ndtensor.tensor import Tensor
from app.schemas.config import ModelConfig, TargetStrategy

logger = logging.getLogger(__name__)


@dataclass
class TargetEncoderState:
    """θ̄ plus how it is produced.

    Attributes:
        params: Target encoder parameters; the online bundle itself under
            ``shared`` and ``shared_stopgrad``.
        strategy: One of the four target strategies.
        momentum: Current EMA coefficient μ.
        target_depth: Number of blocks run for targets; 0 means the
            patch embedding of the raw pixels.
    """

    params: EncoderParams
    strategy: TargetStrategy
    momentum: float
    target_depth: int

    @property
    def aliased(self) -> bool:
        return self.strategy in ("shared", "shared_stopgrad")


def create_target_state(
    strategy: TargetStrategy,
    online: EncoderParams,
    cfg: ModelConfig,
    rng: np.random.Generator,
    momentum: float = 0.996,
    target_depth: int = None,
) -> TargetEncoderState:
    """Build the target encoder for a strategy.

    Raises:
        ConfigurationError: If ``target_depth`` exceeds the encoder depth.
    """
    depth = online.depth if target_depth is None else target_depth
    if depth > online.depth:
        raise ConfigurationError(
            f"target_depth {depth} exceeds encoder depth {online.depth}", key="target_depth"
        )
    if strategy in ("shared", "shared_stopgrad"):
        params = online
    elif strategy == "momentum":
        params = online.clone()
    else:
        params = init_encoder(cfg, rng, dtype=online.dtype)
    logger.debug("target encoder: strategy=%s depth=%d", strategy, depth)
    return TargetEncoderState(params=params, strategy=strategy, momentum=momentum, target_depth=depth)


def target_encode(state: TargetEncoderState, patches, positions: np.ndarray) -> Tensor:
    """Reconstruction targets Z_T, always free of gradient edges.

    Runs the first ``target_depth`` blocks of θ̄; depth 0 returns the patch
    embedding of the raw pixels.

    Raises:
        ConfigurationError: If ``target_depth`` exceeds the encoder depth.
    """
    if state.target_depth > state.params.depth:
        raise ConfigurationError(
            f"target_depth {state.target_depth} exceeds encoder depth {state.params.depth}",
            key="target_depth",
        )
    weights = state.params.bind()
    if state.target_depth == 0:
        return embed_patches(state.params, patches, weights).detach()
    return encode(state.params, patches, positions, weights, depth=state.target_depth).detach()


def ema_update(state: TargetEncoderState, online: EncoderParams, momentum: float) -> TargetEncoderState:
    """θ̄ <- μ θ̄ + (1 - μ) θ, in place.

    μ = 1 leaves θ̄ bitwise unchanged and μ = 0 copies θ bitwise.

    Raises:
        ContractError: If the strategy is not ``momentum``.
        DimensionError: If the parameter shapes differ.
    """
    if state.strategy != "momentum":
        raise ContractError(f"ema_update needs the momentum strategy, got '{state.strategy}'")
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"momentum must lie in [0, 1], got {momentum}", key="momentum")
    for name, target in state.params.params.items():
        source = online.params[name]
        if source.shape != target.shape:
            raise DimensionError(f"EMA shape mismatch for {name}: {target.shape} vs {source.shape}")
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            np.copyto(target, source)
        else:
            target *= momentum
            target += (1.0 - momentum) * source
    state.momentum = momentum
    return state
