"""Parameter storage, initialisers and the layer primitives every network shares."""

import copy
from dataclasses import dataclass
from typing import Dict, Iterator, Mapping, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from app.errors import DimensionError
from app.ndtensor import ops
from app.ndtensor.tensor import TapeGraph, Tensor
from app.services.patching import sincos_pos_embed

Weights = Mapping[str, Tensor]


class ParameterSet:
    """Ordered mapping of parameter name -> float array.

    Arrays are owned by the set; the optimiser and EMA update them in place,
    which keeps aliases (shared-weight targets) in sync.
    """

    def __init__(self, arrays: Optional[Mapping[str, np.ndarray]] = None):
        self.arrays: Dict[str, np.ndarray] = dict(arrays or {})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.arrays[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def bind(self, tape: Optional[TapeGraph] = None, prefix: str = "") -> Dict[str, Tensor]:
        """Expose the arrays as tensors.

        Args:
            tape: Record each array as a named leaf on this tape. Without a
                tape the tensors are constants and carry no gradient edges.
            prefix: Prepended to leaf names so several networks can share
                one tape.

        Returns:
            Dict[str, Tensor]: Unprefixed name -> tensor.
        """
        if tape is None:
            return {name: Tensor(arr) for name, arr in self.arrays.items()}
        return {name: tape.leaf(arr, name=prefix + name) for name, arr in self.arrays.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet({name: arr.copy() for name, arr in self.arrays.items()})

    def astype(self, dtype) -> "ParameterSet":
        return ParameterSet({name: arr.astype(dtype) for name, arr in self.arrays.items()})

    def num_parameters(self) -> int:
        return int(sum(arr.size for arr in self.arrays.values()))


@dataclass
class ParameterBundle:
    """Base class for network parameter bundles (encoder, projector, decoder)."""

    params: ParameterSet

    def bind(self, tape: Optional[TapeGraph] = None, prefix: str = "") -> Dict[str, Tensor]:
        return self.params.bind(tape, prefix)

    def clone(self) -> "ParameterBundle":
        twin = copy.copy(self)
        twin.params = self.params.copy()
        return twin

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.arrays.values())).dtype

    def num_parameters(self) -> int:
        return self.params.num_parameters()


# ---------------------------------------------------------------- initialisers

def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float, dtype) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    values = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=dtype).reshape(shape)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_linear(
    params: ParameterSet,
    name: str,
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator,
    std: float,
    dtype,
) -> None:
    params[f"{name}.weight"] = trunc_normal(rng, (fan_in, fan_out), std, dtype)
    params[f"{name}.bias"] = np.zeros(fan_out, dtype=dtype)


def init_norm(params: ParameterSet, name: str, width: int, dtype) -> None:
    params[f"{name}.weight"] = np.ones(width, dtype=dtype)
    params[f"{name}.bias"] = np.zeros(width, dtype=dtype)


# ---------------------------------------------------------------- layers

def linear(x: Tensor, weights: Weights, name: str) -> Tensor:
    return ops.add(ops.matmul(x, weights[f"{name}.weight"]), weights[f"{name}.bias"])


def norm(x: Tensor, weights: Weights, name: str, eps: float) -> Tensor:
    return ops.layer_norm(x, weights[f"{name}.weight"], weights[f"{name}.bias"], eps)


def as_batch(x, dtype) -> Tuple[Tensor, bool]:
    """Lift a single sequence (n x w) to a batch of one; report if lifted."""
    x = ops.as_tensor(x)
    if x.dtype != dtype and x.handle is None:
        x = Tensor(x.data.astype(dtype))
    if x.ndim == 2:
        return ops.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected n x w or B x n x w input, got shape {x.shape}")
    return x, False


def unbatch(x: Tensor, lifted: bool) -> Tensor:
    return ops.reshape(x, x.shape[1:]) if lifted else x


def position_table(positions: np.ndarray, dim: int, dtype) -> Tensor:
    """SinCos embeddings for (n x 2) or (B x n x 2) grid coordinates."""
    positions = np.asarray(positions)
    flat = positions.reshape(-1, 2)
    table = sincos_pos_embed(flat, dim).data.astype(dtype)
    return Tensor(table.reshape(positions.shape[:-1] + (dim,)))


def lift_positions(table: Tensor, batch: int) -> Tensor:
    """Give an embedding table a leading batch axis when it lacks one."""
    if table.ndim == 2:
        return Tensor(np.broadcast_to(table.data, (batch,) + table.shape).copy())
    return table
