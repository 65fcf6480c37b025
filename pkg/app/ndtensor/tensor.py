"""Dense tensor type and the tape it records differentiable ops onto.

A :class:`Tensor` is a row-major numpy buffer plus an optional handle into
a :class:`TapeGraph`. Tensors without a handle are constants: no gradient
ever flows into them. Every op appends exactly one node to the tape, so
insertion order is a topological order and :func:`backward` simply walks
the node list in reverse.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import ContractError

logger = logging.getLogger(__name__)

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

VectorJacobian = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense n-dimensional float array with an optional gradient handle.

    Args:
        data: Anything ``numpy.asarray`` accepts. Non-float input is cast to
            float64.
        dtype: Optional float32/float64 override.
        handle: Index of the producing node in ``tape``.
        tape: Tape the tensor is recorded on.

    Example:
        ```python
        tape = TapeGraph()
        x = tape.leaf(np.ones(3), name="x")
        y = ops.sum(ops.mul(x, x))
        grads = backward(tape, y)   # {x.handle: Tensor([2., 2., 2.])}
        ```
    """

    __slots__ = ("data", "handle", "tape")

    def __init__(
        self,
        data,
        dtype=None,
        *,
        handle: Optional[int] = None,
        tape: Optional["TapeGraph"] = None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.handle = handle
        self.tape = tape

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.handle is not None

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying buffer."""
        return self.data.copy()

    def item(self) -> float:
        """Return the single element of a one-element tensor.

        Raises:
            ContractError: If the tensor holds more than one element.
        """
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Return a numeric copy with no gradient edges."""
        return Tensor(self.data.copy())

    # Operator sugar; the implementations live in ops.py.
    def __add__(self, other):
        from app.ndtensor import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from app.ndtensor import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from app.ndtensor import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from app.ndtensor import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from app.ndtensor import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from app.ndtensor import ops
        return ops.mul(other, self)

    def __neg__(self):
        from app.ndtensor import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from app.ndtensor import ops
        return ops.matmul(self, other)

    def __repr__(self) -> str:
        tracked = f", handle={self.handle}" if self.handle is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tracked})"


@dataclass
class TapeNode:
    """One recorded op.

    Attributes:
        op: Op kind, e.g. ``"matmul"``; ``"leaf"`` for inputs.
        parents: Handles of the tracked inputs, in argument order.
        vjp: Maps the output gradient to one gradient per parent.
        shape: Output shape.
        name: Leaf name, used to map gradients back to parameters.
    """

    op: str
    parents: Tuple[int, ...]
    vjp: Optional[VectorJacobian]
    shape: Tuple[int, ...]
    name: Optional[str] = None


class TapeGraph:
    """Append-only record of the ops of one forward pass.

    A tape belongs to one thread and one training step; create a fresh one
    per forward pass.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data, name: Optional[str] = None, dtype=None) -> Tensor:
        """Register an input whose gradient should be computed.

        Args:
            data: Array-like value of the leaf.
            name: Optional name (parameter name) for the leaf.
            dtype: Optional dtype override.

        Returns:
            Tensor: Tracked tensor referencing the new node.
        """
        value = data.data if isinstance(data, Tensor) else data
        tensor = Tensor(value, dtype=dtype)
        self.nodes.append(TapeNode("leaf", (), None, tensor.shape, name))
        tensor.handle = len(self.nodes) - 1
        tensor.tape = self
        return tensor

    def record(
        self,
        op: str,
        inputs: Sequence[Tensor],
        vjp: VectorJacobian,
        out: np.ndarray,
    ) -> Tensor:
        """Append an op node for the tracked subset of ``inputs``.

        Args:
            op: Op kind.
            inputs: All op inputs, tracked or constant.
            vjp: Returns one gradient per input (``None`` allowed).
            out: Forward result.

        Returns:
            Tensor: Tracked output tensor.
        """
        tracked = [i for i, t in enumerate(inputs) if t.handle is not None]
        parents = tuple(inputs[i].handle for i in tracked)

        def tracked_vjp(grad: np.ndarray) -> List[Optional[np.ndarray]]:
            full = vjp(grad)
            return [full[i] for i in tracked]

        self.nodes.append(TapeNode(op, parents, tracked_vjp, out.shape))
        return Tensor(out, handle=len(self.nodes) - 1, tape=self)

    def leaves(self) -> Dict[int, TapeNode]:
        """Map handle -> node for every leaf on the tape."""
        return {h: n for h, n in enumerate(self.nodes) if n.op == "leaf"}


def backward(graph: TapeGraph, root: Tensor) -> Dict[int, Tensor]:
    """Reverse-mode gradient of a scalar root w.r.t. every leaf.

    Args:
        graph: Tape the root was recorded on.
        root: Scalar tensor to differentiate.

    Returns:
        Dict[int, Tensor]: Leaf handle -> gradient. Leaves the root does not
        depend on get zero gradients.

    Raises:
        ContractError: If the root is not a scalar or not on ``graph``.
    """
    if root.size != 1:
        raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
    if root.tape is not graph or root.handle is None:
        raise ContractError("backward() root is not recorded on the given tape")

    grads: List[Optional[np.ndarray]] = [None] * len(graph.nodes)
    grads[root.handle] = np.ones(root.shape, dtype=root.dtype)

    # Insertion order is topological: walk it strictly backwards.
    for index in range(root.handle, -1, -1):
        grad = grads[index]
        node = graph.nodes[index]
        if grad is None or node.vjp is None:
            continue
        for parent, parent_grad in zip(node.parents, node.vjp(grad)):
            if parent_grad is None:
                continue
            if grads[parent] is None:
                grads[parent] = parent_grad
            else:
                grads[parent] = grads[parent] + parent_grad

    result: Dict[int, Tensor] = {}
    for handle, node in graph.leaves().items():
        grad = grads[handle]
        if grad is None:
            grad = np.zeros(node.shape, dtype=root.dtype)
        result[handle] = Tensor(grad)
    return result


def gradients_by_name(graph: TapeGraph, grads: Dict[int, Tensor]) -> Dict[str, np.ndarray]:
    """Re-key a :func:`backward` result by leaf name, dropping unnamed leaves."""
    named = {}
    for handle, node in graph.leaves().items():
        if node.name is not None:
            named[node.name] = grads[handle].data
    return named
