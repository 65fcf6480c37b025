"""Minimal reverse-mode tensor engine used by every network in the lab."""

from app.ndtensor.gradcheck import finite_diff_grad, max_absolute_error, max_relative_error
from app.ndtensor.tensor import TapeGraph, TapeNode, Tensor, backward, gradients_by_name

__all__ = [
    "Tensor",
    "TapeGraph",
    "TapeNode",
    "backward",
    "gradients_by_name",
    "finite_diff_grad",
    "max_absolute_error",
    "max_relative_error",
]
