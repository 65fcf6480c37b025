"""Schemas for images, patch sequences and visible/target splits."""

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator


class ImageTensor(BaseModel):
    """Square image with values in [0, 1], stored height x width x channels."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray

    @model_validator(mode="after")
    def check_values(self) -> "ImageTensor":
        if self.values.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {self.values.shape}")
        if self.values.shape[0] != self.values.shape[1]:
            raise ValueError(f"image must be square, got {self.values.shape[:2]}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("image contains non-finite values")
        return self

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


class PatchSet(BaseModel):
    """Flattened patches with their grid coordinates.

    Attributes:
        patches: L x (P*P*C) row-major patch pixels.
        positions: L x 2 integer (row, col) cell coordinates.
        patch_size: P in pixels.
        gap: Mean pixels between consecutive patches (0 when contiguous).
        offsets: L x 2 pixel coordinates of each patch's top-left corner.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    patches: np.ndarray
    positions: np.ndarray
    patch_size: int
    gap: int = 0
    offsets: np.ndarray

    @model_validator(mode="after")
    def check_lengths(self) -> "PatchSet":
        if len(self.patches) != len(self.positions) or len(self.patches) != len(self.offsets):
            raise ValueError("patches, positions and offsets must have the same length")
        return self

    @property
    def num_patches(self) -> int:
        return len(self.patches)


class MaskPlan(BaseModel):
    """Disjoint visible/target index sets covering all L grid locations."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    visible: np.ndarray
    target: np.ndarray
    ratio: float

    @model_validator(mode="after")
    def check_partition(self) -> "MaskPlan":
        total = len(self.visible) + len(self.target)
        merged = np.sort(np.concatenate([self.visible, self.target]))
        if not np.array_equal(merged, np.arange(total)):
            raise ValueError("visible and target sets must partition 0..L-1")
        return self

    @property
    def num_patches(self) -> int:
        return len(self.visible) + len(self.target)
