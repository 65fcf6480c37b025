"""Differentiable operations on :class:`~app.ndtensor.tensor.Tensor`.

Each op computes its forward value with numpy, checks it is finite and,
when any input is tracked, records a vector-Jacobian product on the
input's tape. Broadcasting is limited to what the model needs: a trailing
vector against a batch (biases, mask tokens) and batched matmul.
"""

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from app.errors import ContractError, DegenerateVectorError, DimensionError, NonFiniteError
from app.ndtensor.tensor import TapeGraph, Tensor

Operand = Union[Tensor, np.ndarray, float, int]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(value: Operand, like: Optional[Tensor] = None) -> Tensor:
    """Wrap ``value`` as a constant tensor, matching ``like``'s dtype."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


def _tape_of(inputs: Sequence[Tensor]) -> Optional[TapeGraph]:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise ContractError("op inputs are recorded on different tapes")
        tape = t.tape
    return tape


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(op, inputs, vjp, out)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return _emit("add", out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return _emit("sub", out, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data
    return _emit(
        "mul",
        out,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


def square(x: Tensor) -> Tensor:
    return _emit("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _emit("abs", np.abs(x.data), (x,), lambda g: (np.sign(x.data) * g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _emit("log", out, (x,), lambda g: (g / x.data,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", out, (x,), vjp)


def detach(x: Tensor) -> Tensor:
    """Numeric copy of ``x`` with no gradient edges."""
    return x.detach()


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable ``log(sum(exp(x)))`` along ``axis``."""
    peak = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.log(total) + peak
    weights = shifted / total
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return _emit("logsumexp", out, (x,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batching leading axes.

    Raises:
        DimensionError: If the inner extents differ; names both shapes.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)

    return _emit("matmul", out, (a, b), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swap_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=axis)

    return _emit("concat", out, tensors, vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def vjp(g):
        grad = np.zeros(x.shape, dtype=g.dtype)
        grad[index] = g
        return (grad,)

    return _emit("narrow", x.data[index].copy(), (x,), vjp)


# ---------------------------------------------------------------- normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction.

    Raises:
        DimensionError: If ``axis`` is out of range.
    """
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    out = shifted / np.sum(shifted, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _emit("softmax", out, (x,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine.

    Raises:
        DimensionError: If gamma/beta do not match the last axis of ``x``.
    """
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match last axis of {x.shape}"
        )
    centered = x.data - np.mean(x.data, axis=-1, keepdims=True)
    variance = np.mean(centered * centered, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_std = 1.0 / np.sqrt(variance + eps)
        normed = centered * inv_std
    out = normed * gamma.data + beta.data

    def vjp(g):
        grad_normed = g * gamma.data
        grad_x = inv_std * (
            grad_normed
            - np.mean(grad_normed, axis=-1, keepdims=True)
            - normed * np.mean(grad_normed * normed, axis=-1, keepdims=True)
        )
        grad_gamma = unbroadcast(g * normed, gamma.shape)
        grad_beta = unbroadcast(g, beta.shape)
        return grad_x, grad_gamma, grad_beta

    return _emit("layer_norm", out, (x, gamma, beta), vjp)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit L2 norm.

    Raises:
        DegenerateVectorError: If any vector has zero norm.
    """
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise DegenerateVectorError("cannot normalise a zero-norm vector")
    out = x.data / norm

    def vjp(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _emit("l2_normalize", out, (x,), vjp)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors as a scalar tensor.

    Raises:
        DimensionError: If the shapes differ.
        DegenerateVectorError: If either vector has zero norm.
    """
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_sim shape mismatch: {a.shape} vs {b.shape}")
    return sum(mul(l2_normalize(a), l2_normalize(b)))


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity matrix between the rows of ``a`` and ``b``.

    Works batched: ``(..., n, d) x (..., m, d) -> (..., n, m)``.
    """
    return matmul(l2_normalize(a), swap_last(l2_normalize(b)))
