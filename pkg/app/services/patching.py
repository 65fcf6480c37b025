"""Patch grids, visible/target splits and fixed SinCos position embeddings.

Everything here is a pure function of its inputs plus an explicitly passed
``numpy.random.Generator``, so data-loading threads can call it with
independent generators.
"""

import math
from typing import Union

import numpy as np

from app.errors import ConfigurationError
from app.ndtensor import Tensor
from app.schemas.patches import ImageTensor, MaskPlan, PatchSet

ImageLike = Union[ImageTensor, np.ndarray]


def _pixels(img: ImageLike) -> np.ndarray:
    if isinstance(img, ImageTensor):
        return img.values
    values = np.asarray(img)
    if values.ndim == 2:
        values = values[:, :, None]
    return values


def _grid_count(side: int, cell: int) -> int:
    if side % cell:
        raise ConfigurationError(
            f"image side {side} is not divisible by the cell size {cell}"
        )
    return side // cell


def _cut(values: np.ndarray, offsets: np.ndarray, patch_size: int) -> np.ndarray:
    patches = [
        values[row:row + patch_size, col:col + patch_size, :].reshape(-1)
        for row, col in offsets
    ]
    return np.stack(patches)


def grid_positions(grid: int) -> np.ndarray:
    """Row-major (row, col) coordinates of a ``grid x grid`` lattice."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    return np.stack([rows, cols], axis=1)


def extract_contiguous_grid(img: ImageLike, patch_size: int) -> PatchSet:
    """Split an image into a regular grid of non-overlapping patches.

    Args:
        img: Square H x W x C image.
        patch_size: Patch side P in pixels.

    Returns:
        PatchSet: ``(side / P)^2`` patches in row-major order.

    Raises:
        ConfigurationError: If the side is not divisible by P.

    Example:
        ```python
        patches = extract_contiguous_grid(np.zeros((224, 224, 3)), 16)
        patches.num_patches  # 196
        ```
    """
    values = _pixels(img)
    grid = _grid_count(values.shape[0], patch_size)
    positions = grid_positions(grid)
    offsets = positions * patch_size
    return PatchSet(
        patches=_cut(values, offsets, patch_size),
        positions=positions,
        patch_size=patch_size,
        gap=0,
        offsets=offsets,
    )


def extract_noncontiguous_grid(
    img: ImageLike,
    patch_size: int,
    gap: int,
    rng: np.random.Generator,
) -> PatchSet:
    """Sample one P x P patch at a random offset inside each (P+G) x (P+G) cell.

    Args:
        img: Square H x W x C image whose side is a multiple of P+G.
        patch_size: Patch side P in pixels.
        gap: Mean gap G between consecutive patches.
        rng: Seeded generator; offsets are uniform on {0..G} per axis.

    Returns:
        PatchSet: One patch per cell; positions are cell coordinates.

    Raises:
        ConfigurationError: If the side is not divisible by P+G.
    """
    values = _pixels(img)
    cell = patch_size + gap
    grid = _grid_count(values.shape[0], cell)
    positions = grid_positions(grid)
    jitter = rng.integers(0, gap + 1, size=positions.shape)
    offsets = positions * cell + jitter
    return PatchSet(
        patches=_cut(values, offsets, patch_size),
        positions=positions,
        patch_size=patch_size,
        gap=gap,
        offsets=offsets,
    )


def tile_patches(patch_set: PatchSet, side: int, channels: int) -> np.ndarray:
    """Paste patches back at their pixel offsets on a zero canvas."""
    size = patch_set.patch_size
    canvas = np.zeros((side, side, channels), dtype=patch_set.patches.dtype)
    for patch, (row, col) in zip(patch_set.patches, patch_set.offsets):
        canvas[row:row + size, col:col + size, :] = patch.reshape(size, size, channels)
    return canvas


def target_count(num_patches: int, ratio: float) -> int:
    """|T| = round-half-up(ratio * L)."""
    return int(math.floor(ratio * num_patches + 0.5))


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly split ``0..L-1`` into visible and target index sets.

    Args:
        num_patches: L, the number of grid locations.
        ratio: Fraction of locations assigned to the target set.
        rng: Seeded generator.

    Returns:
        MaskPlan: Sorted visible and target indices.

    Raises:
        ConfigurationError: If the ratio is outside (0, 1), L < 2, or either
            set would be empty.

    Example:
        ```python
        plan = sample_mask(196, 0.9, np.random.default_rng(0))
        len(plan.visible), len(plan.target)  # (20, 176)
        ```
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigurationError(f"mask_ratio must lie in (0, 1), got {ratio}", key="mask_ratio")
    if num_patches < 2:
        raise ConfigurationError(f"need at least 2 patches to mask, got {num_patches}")
    n_target = target_count(num_patches, ratio)
    if n_target == 0 or n_target == num_patches:
        raise ConfigurationError(
            f"mask_ratio {ratio} leaves an empty visible or target set for L={num_patches}",
            key="mask_ratio",
        )
    order = rng.permutation(num_patches)
    return MaskPlan(
        visible=np.sort(order[n_target:]),
        target=np.sort(order[:n_target]),
        ratio=ratio,
    )


def _sincos_1d(dim: int, coords: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    angles = np.outer(coords.astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_pos_embed(positions: np.ndarray, dim: int) -> Tensor:
    """Fixed 2D sine-cosine embedding of grid coordinates.

    The first half of the width encodes the row, the second half the
    column; each half is ``[sin | cos]`` over geometric frequencies.

    Args:
        positions: L x 2 (row, col) grid coordinates.
        dim: Embedding width, divisible by 4.

    Returns:
        Tensor: Constant L x dim float64 embedding.

    Raises:
        ConfigurationError: If ``dim`` is not divisible by 4.
    """
    if dim % 4:
        raise ConfigurationError(f"SinCos embedding width must be divisible by 4, got {dim}")
    positions = np.asarray(positions)
    rows = _sincos_1d(dim // 2, positions[:, 0])
    cols = _sincos_1d(dim // 2, positions[:, 1])
    return Tensor(np.concatenate([rows, cols], axis=1))
