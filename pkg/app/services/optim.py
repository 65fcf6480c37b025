"""AdamW and the learning-rate / momentum schedules."""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, MutableMapping

import numpy as np

from app.errors import ConfigurationError, DimensionError


def lr_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0.

    Raises:
        ConfigurationError: If ``step`` lies beyond ``total_steps``.
    """
    if step > total_steps:
        raise ConfigurationError(f"step {step} is past the schedule end {total_steps}")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


def momentum_schedule(step: int, total_steps: int, start: float, end: float = 1.0) -> float:
    """Cosine ramp of the EMA coefficient from ``start`` to ``end``."""
    if total_steps <= 0 or start == end:
        return start
    progress = min(max(step / total_steps, 0.0), 1.0)
    return end - (end - start) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamMoments:
    """First/second moment estimates per parameter name plus the step count."""

    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamMoments":
        return cls(
            first={name: np.zeros_like(arr) for name, arr in params.items()},
            second={name: np.zeros_like(arr) for name, arr in params.items()},
        )

    def copy(self) -> "AdamMoments":
        return AdamMoments(
            first={k: v.copy() for k, v in self.first.items()},
            second={k: v.copy() for k, v in self.second.items()},
            step=self.step,
        )


def _check_aligned(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], moments: AdamMoments
) -> None:
    for label, table in (("gradient", grads), ("first moment", moments.first), ("second moment", moments.second)):
        missing = [name for name in params if name not in table]
        if missing:
            raise DimensionError(f"AdamW: no {label} for {', '.join(missing)}")
    for name, param in params.items():
        shapes = (grads[name].shape, moments.first[name].shape, moments.second[name].shape)
        if any(shape != param.shape for shape in shapes):
            raise DimensionError(
                f"AdamW shape mismatch for {name}: param {param.shape}, grad {shapes[0]}, "
                f"moments {shapes[1]}/{shapes[2]}"
            )


def adamw_update(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    moments: AdamMoments,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.95,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> AdamMoments:
    """One decoupled-weight-decay Adam step, updating ``params`` in place.

    Weight decay only touches parameters of rank >= 2, leaving biases,
    layer-norm affines and the mask token undecayed.

    Args:
        params: Name -> parameter array.
        grads: Name -> gradient of the same shape.
        moments: Moment estimates; advanced by one step in place.
        lr: Learning rate for this step.
        beta1: First-moment decay.
        beta2: Second-moment decay.
        eps: Denominator stabiliser.
        weight_decay: Decoupled decay coefficient.

    Returns:
        AdamMoments: The updated ``moments``.

    Raises:
        DimensionError: If a gradient or moment is missing or its shape differs
            from its parameter. Nothing is modified in that case.
    """
    _check_aligned(params, grads, moments)
    moments.step += 1
    correction1 = 1.0 - beta1 ** moments.step
    correction2 = 1.0 - beta2 ** moments.step
    for name, param in params.items():
        grad = grads[name]
        first, second = moments.first[name], moments.second[name]
        if weight_decay and param.ndim >= 2:
            param *= 1.0 - lr * weight_decay
        first *= beta1
        first += (1.0 - beta1) * grad
        second *= beta2
        second += (1.0 - beta2) * grad * grad
        denom = np.sqrt(second / correction2) + eps
        param -= (lr / correction1) * first / denom
    return moments


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    """L2 norm of all gradients taken together."""
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
