"""Image datasets: the PPM/PGM directory format, the synthetic corpora and batch preparation."""

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from app.errors import ConfigurationError, DataIOError
from app.schemas.config import TrainConfig
from app.services.synth import INDEX_FILE, textured_shapes, two_textures

logger = logging.getLogger(__name__)

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
CROP_RATIOS = (3.0 / 4.0, 4.0 / 3.0)


@dataclass
class ImageDataset:
    """Raw uint8 images (H x W x C each), labels and optional region masks."""

    images: List[np.ndarray]
    labels: np.ndarray
    masks: Optional[List[np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.images)

    @property
    def channels(self) -> int:
        return self.images[0].shape[-1]

    def subset(self, indices: Sequence[int]) -> "ImageDataset":
        masks = [self.masks[i] for i in indices] if self.masks is not None else None
        return ImageDataset(
            images=[self.images[i] for i in indices],
            labels=self.labels[np.asarray(indices, dtype=np.int64)],
            masks=masks,
        )

    def split(self, test_fraction: float, seed: int) -> Tuple["ImageDataset", "ImageDataset"]:
        """Seeded train/test split; the test part holds ``round(N * fraction)`` images."""
        order = np.random.default_rng(seed).permutation(len(self))
        n_test = min(max(int(round(len(self) * test_fraction)), 1), len(self) - 1)
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        values = np.asarray(img)
    if values.ndim == 2:
        values = values[:, :, None]
    return values


def load_dataset(path) -> ImageDataset:
    """Read a directory holding ``index.csv`` (filename,label[,mask]) and its rasters.

    Raises:
        DataIOError: If the directory, index or an image cannot be read.
    """
    root = Path(path)
    index = root / INDEX_FILE
    try:
        with open(index, newline="") as f:
            rows = list(csv.DictReader(f))
        images = [_read_image(root / row["filename"]) for row in rows]
        labels = np.array([int(row["label"]) for row in rows], dtype=np.int64)
        masks = None
        if rows and row_has_mask(rows[0]):
            masks = [(_read_image(root / row["mask"])[:, :, 0] > 127).astype(np.uint8) for row in rows]
    except (OSError, KeyError, ValueError) as e:
        raise DataIOError(f"cannot read dataset at {root}: {e}") from e
    if not images:
        raise DataIOError(f"dataset at {root} is empty")
    logger.info("loaded %d images from %s", len(images), root)
    return ImageDataset(images=images, labels=labels, masks=masks)


def row_has_mask(row) -> bool:
    return bool(row.get("mask"))


def synthetic_dataset(cfg: TrainConfig, seed: int) -> ImageDataset:
    data = textured_shapes(cfg.synthetic_classes, cfg.synthetic_count, cfg.synthetic_image_size, seed)
    return ImageDataset(images=list(data.images), labels=data.labels)


def segmentation_dataset(count: int, size: int, seed: int) -> ImageDataset:
    data = two_textures(count, size, seed)
    return ImageDataset(images=list(data.images), labels=data.labels, masks=list(data.masks))


def resolve_dataset(cfg: TrainConfig, channels: int, seed: Optional[int] = None) -> ImageDataset:
    """The dataset a run trains on: ``synthetic`` or a directory path.

    Raises:
        ConfigurationError: If the channel count does not match the model.
        DataIOError: If the directory cannot be read.
    """
    seed = cfg.seed if seed is None else seed
    dataset = synthetic_dataset(cfg, seed) if cfg.dataset == "synthetic" else load_dataset(cfg.dataset)
    if dataset.channels != channels:
        raise ConfigurationError(
            f"dataset has {dataset.channels} channels but the model expects {channels}",
            key="model.channels",
        )
    return dataset


def random_resized_crop(img: Image.Image, size: int, min_area: float, rng: np.random.Generator) -> Image.Image:
    """Crop a random box of area in [min_area, 1] and aspect in [3/4, 4/3], resize to ``size``."""
    width, height = img.size
    area = width * height
    for _ in range(10):
        target_area = area * rng.uniform(min_area, 1.0)
        ratio = math.exp(rng.uniform(math.log(CROP_RATIOS[0]), math.log(CROP_RATIOS[1])))
        crop_w = int(round(math.sqrt(target_area * ratio)))
        crop_h = int(round(math.sqrt(target_area / ratio)))
        if 0 < crop_w <= width and 0 < crop_h <= height:
            left = int(rng.integers(0, width - crop_w + 1))
            top = int(rng.integers(0, height - crop_h + 1))
            box = (left, top, left + crop_w, top + crop_h)
            return img.resize((size, size), Image.Resampling.BILINEAR, box=box)
    return img.resize((size, size), Image.Resampling.BILINEAR)


def _pil(values: np.ndarray) -> Image.Image:
    return Image.fromarray(values[:, :, 0] if values.shape[-1] == 1 else values)


def _array(img: Image.Image) -> np.ndarray:
    values = np.asarray(img)
    return values[:, :, None] if values.ndim == 2 else values


def normalize(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels -> ``(x / 255 - mean) / std``."""
    return ((pixels.astype(np.float64) / 255.0 - PIXEL_MEAN) / PIXEL_STD).astype(dtype)


def prepare_batch(
    dataset: ImageDataset,
    indices: Sequence[int],
    canvas: int,
    rng: np.random.Generator,
    augment: bool = True,
    min_crop_area: float = 0.2,
    dtype=np.float32,
) -> np.ndarray:
    """Augment, resize to ``canvas`` and normalise a batch of images.

    Returns:
        np.ndarray: B x canvas x canvas x C normalised pixels.
    """
    batch = []
    for i in indices:
        img = _pil(dataset.images[i])
        if augment:
            img = random_resized_crop(img, canvas, min_crop_area, rng)
            if rng.random() < 0.5:
                img = img.transpose(Image.Transpose.FLIP_LEFT_RIGHT)
        else:
            img = img.resize((canvas, canvas), Image.Resampling.BILINEAR)
        batch.append(_array(img))
    return normalize(np.stack(batch), dtype)


def resize_mask(mask: np.ndarray, canvas: int) -> np.ndarray:
    """Nearest-neighbour resize of a 0/1 region mask."""
    img = Image.fromarray(mask.astype(np.uint8) * 255)
    return (np.asarray(img.resize((canvas, canvas), Image.Resampling.NEAREST)) > 127).astype(np.int64)
