"""Seeded synthetic corpora so every experiment runs with zero downloads.

``textured_shapes`` draws one textured foreground shape per image on a
textured background; shape, hue and stripe texture depend on the class.
``two_textures`` splits each image into two differently textured regions
and keeps the region mask as ground truth for segmentation.
"""

import colorsys
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from app.errors import ConfigurationError, DataIOError

logger = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "ring")
INDEX_FILE = "index.csv"


@dataclass
class SyntheticSet:
    """uint8 images (N x S x S x 3), integer labels and optional 0/1 masks."""

    images: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray] = None


def _coords(size: int):
    axis = (np.arange(size, dtype=np.float64) + 0.5) / size
    return np.meshgrid(axis, axis, indexing="ij")


def _stripes(rows, cols, frequency: float, angle: float, phase: float) -> np.ndarray:
    along = rows * np.sin(angle) + cols * np.cos(angle)
    return 0.5 + 0.5 * np.sin(2.0 * np.pi * frequency * along + phase)


def _shape_mask(kind: str, rows, cols, center, radius) -> np.ndarray:
    dr, dc = rows - center[0], cols - center[1]
    if kind == "disk":
        return dr ** 2 + dc ** 2 <= radius ** 2
    if kind == "square":
        return (np.abs(dr) <= radius * 0.85) & (np.abs(dc) <= radius * 0.85)
    if kind == "triangle":
        return (dr <= radius * 0.8) & (dr >= -radius) & (np.abs(dc) <= (dr + radius) * 0.55)
    distance = dr ** 2 + dc ** 2
    return (distance <= radius ** 2) & (distance >= (0.55 * radius) ** 2)


def _class_colour(label: int, classes: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(label / max(classes, 1), 0.85, 0.95))


def _background(rows, cols, rng: np.random.Generator) -> np.ndarray:
    grey = rng.uniform(0.25, 0.55)
    texture = _stripes(rows, cols, rng.uniform(1.0, 3.0), rng.uniform(0.0, np.pi), rng.uniform(0.0, 2 * np.pi))
    base = grey + 0.12 * (texture - 0.5)
    noise = rng.normal(0.0, 0.03, size=rows.shape + (3,))
    return base[:, :, None] + noise


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)


def textured_shapes(classes: int, count: int, size: int = 96, seed: int = 0) -> SyntheticSet:
    """Generate a balanced, seeded classification corpus.

    Args:
        classes: Number of classes.
        count: Number of images.
        size: Image side in pixels.
        seed: Generator seed; the output is a pure function of the arguments.

    Returns:
        SyntheticSet: Images and labels in a seeded shuffled order.

    Raises:
        ConfigurationError: If ``classes`` or ``count`` is below 1.
    """
    if classes < 1 or count < 1:
        raise ConfigurationError(f"classes and count must be >= 1, got {classes} and {count}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % classes)
    rows, cols = _coords(size)
    images = np.empty((count, size, size, 3), dtype=np.uint8)

    for i, label in enumerate(labels):
        label = int(label)
        kind = SHAPES[label % len(SHAPES)]
        colour = _class_colour(label, classes)
        frequency = 3.0 + 2.0 * (label // len(SHAPES))
        angle = np.pi * label / classes

        center = rng.uniform(0.35, 0.65, size=2)
        radius = rng.uniform(0.22, 0.32)
        mask = _shape_mask(kind, rows, cols, center, radius)
        texture = 0.65 + 0.35 * _stripes(rows, cols, frequency, angle, rng.uniform(0.0, 2 * np.pi))

        pixels = _background(rows, cols, rng)
        pixels[mask] = (texture[:, :, None] * colour)[mask]
        images[i] = _to_uint8(pixels)

    logger.debug("generated %d textured-shape images, %d classes", count, classes)
    return SyntheticSet(images=images, labels=labels.astype(np.int64))


def two_textures(count: int, size: int = 96, seed: int = 0) -> SyntheticSet:
    """Images made of two textured regions plus the region masks.

    The boundary is either a random half-plane or a random disk. Labels are
    0 for half-plane images and 1 for disk images.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    rows, cols = _coords(size)
    images = np.empty((count, size, size, 3), dtype=np.uint8)
    masks = np.empty((count, size, size), dtype=np.uint8)
    labels = np.empty(count, dtype=np.int64)

    for i in range(count):
        disk = bool(rng.random() < 0.5)
        if disk:
            center = rng.uniform(0.35, 0.65, size=2)
            region = (rows - center[0]) ** 2 + (cols - center[1]) ** 2 <= rng.uniform(0.2, 0.35) ** 2
        else:
            angle = rng.uniform(0.0, 2 * np.pi)
            offset = rng.uniform(-0.15, 0.15)
            region = (rows - 0.5) * np.sin(angle) + (cols - 0.5) * np.cos(angle) > offset

        hue = rng.uniform(0.0, 1.0)
        first = np.array(colorsys.hsv_to_rgb(hue, 0.8, 0.9))
        second = np.array(colorsys.hsv_to_rgb((hue + 0.5) % 1.0, 0.8, 0.6))
        angle_a = rng.uniform(0.0, np.pi)
        tex_a = _stripes(rows, cols, rng.uniform(3.0, 5.0), angle_a, 0.0)
        tex_b = _stripes(rows, cols, rng.uniform(8.0, 12.0), angle_a + np.pi / 2, 0.0)

        pixels = (0.6 + 0.4 * tex_a)[:, :, None] * first
        pixels[region] = ((0.6 + 0.4 * tex_b)[:, :, None] * second)[region]
        pixels += rng.normal(0.0, 0.02, size=pixels.shape)
        images[i] = _to_uint8(pixels)
        masks[i] = region.astype(np.uint8)
        labels[i] = int(disk)

    return SyntheticSet(images=images, labels=labels, masks=masks)


def write_dataset(out_dir, data: SyntheticSet) -> Path:
    """Write images as PPM, masks as PGM and an ``index.csv`` label index.

    Raises:
        DataIOError: If the directory or a file cannot be written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        header = ["filename", "label"] + (["mask"] if data.masks is not None else [])
        with open(out / INDEX_FILE, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for i, (image, label) in enumerate(zip(data.images, data.labels)):
                name = f"img_{i:05d}.ppm"
                Image.fromarray(image).save(out / name, format="PPM")
                row = [name, int(label)]
                if data.masks is not None:
                    mask_name = f"mask_{i:05d}.pgm"
                    Image.fromarray(data.masks[i] * 255).save(out / mask_name, format="PPM")
                    row.append(mask_name)
                writer.writerow(row)
    except OSError as e:
        raise DataIOError(f"cannot write dataset to {out}: {e}") from e
    logger.info("wrote %d images to %s", len(data.images), out)
    return out
