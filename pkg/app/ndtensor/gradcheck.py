"""Central finite differences, the oracle every analytic gradient is held to."""

from typing import Callable, Union

import numpy as np

from app.errors import ConfigurationError
from app.ndtensor.tensor import Tensor

ScalarFn = Callable[[Tensor], Union[Tensor, float]]


def _scalar(value: Union[Tensor, float]) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(f: ScalarFn, x: Union[Tensor, np.ndarray], h: float = 1e-4) -> Tensor:
    """Estimate the gradient of a scalar function by central differences.

    Each element is perturbed by ``+h`` and ``-h`` in turn and
    ``(f(x + h e_i) - f(x - h e_i)) / 2h`` is recorded. ``f`` receives
    constant tensors, so no tape is involved.

    Args:
        f: Scalar function of one tensor.
        x: Point to differentiate at.
        h: Step size.

    Returns:
        Tensor: Gradient estimate with the shape and dtype of ``x``.

    Raises:
        ConfigurationError: If ``h`` is not positive.

    Example:
        ```python
        finite_diff_grad(lambda t: ops.sum(ops.square(t)), Tensor([3.0]))
        # Tensor([6.0 +- 1e-7])
        ```
    """
    if h <= 0:
        raise ConfigurationError(f"finite difference step must be positive, got {h}")
    point = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    if point.dtype not in (np.float32, np.float64):
        point = point.astype(np.float64)
    grad = np.zeros_like(point)

    for index in np.ndindex(point.shape):
        original = point[index]
        point[index] = original + h
        plus = _scalar(f(Tensor(point.copy())))
        point[index] = original - h
        minus = _scalar(f(Tensor(point.copy())))
        point[index] = original
        grad[index] = (plus - minus) / (2.0 * h)
    return Tensor(grad)


def max_relative_error(
    analytic: np.ndarray, numeric: np.ndarray, rel_floor: float = 1e-2, abs_floor: float = 1e-6
) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    ``floor`` is ``rel_floor`` times the largest gradient magnitude, never
    below ``abs_floor``, so it shrinks with the gradient it guards.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    magnitude = np.maximum(np.abs(analytic), np.abs(numeric))
    floor = max(rel_floor * float(magnitude.max()), abs_floor)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(magnitude, floor)))


def max_absolute_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise ``|a - n|``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - np.asarray(numeric, dtype=np.float64))))
