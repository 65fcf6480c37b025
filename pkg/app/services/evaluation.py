"""Representation-quality diagnostics on frozen features.

Pooling, cosine 1-NN accuracy, a linear probe, the pooled pairwise cosine
collapse metric and per-image hierarchical segmentation of patch latents.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy.cluster.hierarchy import cut_tree, linkage
from sklearn.metrics import adjusted_rand_score

from app.errors import ConfigurationError, DataIOError, DegenerateVectorError, DimensionError
from app.models.encoder import EncoderParams, encode
from app.schemas.config import PoolingKind
from app.schemas.features import FeatureBank, SegmentationMap
from app.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from app.services.dataset import ImageDataset, prepare_batch, resize_mask
from app.services.patching import extract_contiguous_grid

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- pooling

def pool_features(latents, method: PoolingKind = "mean", k: int = 10) -> np.ndarray:
    """Pool L x d patch latents (or B x L x d) into d-dim (or B x d) features.

    ``topk`` averages, per dimension, the k largest values over patches.

    Raises:
        ConfigurationError: If ``k`` exceeds L or the method is unknown.
    """
    z = np.asarray(getattr(latents, "data", latents))
    length = z.shape[-2]
    if method == "mean":
        return z.mean(axis=-2)
    if method == "max":
        return z.max(axis=-2)
    if method != "topk":
        raise ConfigurationError(f"unknown pooling '{method}'", key="eval.pooling")
    if not 1 <= k <= length:
        raise ConfigurationError(f"top-k pooling needs 1 <= k <= {length}, got k={k}", key="eval.topk")
    top = np.sort(z, axis=-2)[..., length - k:, :]
    return top.mean(axis=-2)


# ---------------------------------------------------------------- similarity

def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateVectorError("cannot take the cosine of a zero-norm feature vector")
    return x / norms


def pairwise_mean_cosine(bank) -> float:
    """Mean cosine similarity over unordered pairs of rows.

    Raises:
        ConfigurationError: If there are fewer than 2 rows.
    """
    features = bank.features if isinstance(bank, FeatureBank) else np.asarray(bank)
    count = len(features)
    if count < 2:
        raise ConfigurationError(f"pairwise cosine needs at least 2 feature rows, got {count}")
    unit = _unit_rows(features.astype(np.float64))
    upper = np.triu_indices(count, k=1)
    return float((unit @ unit.T)[upper].mean())


def nn_accuracy(train: FeatureBank, test: FeatureBank, exclude_self: bool = False) -> float:
    """Fraction of test rows whose cosine nearest train row shares their label.

    Exact search; ties go to the lowest train index.

    Args:
        train: Reference bank.
        test: Query bank.
        exclude_self: Skip the train row with the same index (test is train).

    Raises:
        DimensionError: If the feature widths differ.
        ConfigurationError: If the train bank is empty.
    """
    if train.size == 0:
        raise ConfigurationError("nearest-neighbour search needs a non-empty train bank")
    if train.dim != test.dim:
        raise DimensionError(f"feature width mismatch: train {train.features.shape} vs test {test.features.shape}")
    sims = _unit_rows(test.features.astype(np.float64)) @ _unit_rows(train.features.astype(np.float64)).T
    if exclude_self:
        if train.size != test.size:
            raise DimensionError("exclude_self needs banks of equal size")
        np.fill_diagonal(sims, -np.inf)
    nearest = np.argmax(sims, axis=1)
    return float(np.mean(train.labels[nearest] == test.labels))


def linear_probe(
    train: FeatureBank,
    test: FeatureBank,
    epochs: int = 100,
    lr: float = 0.1,
    momentum: float = 0.9,
    batch_size: int = 64,
    seed: int = 0,
) -> float:
    """Top-1 test accuracy of a softmax classifier trained on frozen features.

    Features are standardised with train statistics; the classifier is
    trained with mini-batch SGD with momentum under a fixed seed.

    Raises:
        ConfigurationError: If the train bank holds fewer than 2 classes.
        DimensionError: If the feature widths differ.
    """
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise ConfigurationError(f"linear probe needs at least 2 classes, got {len(classes)}")
    if train.dim != test.dim:
        raise DimensionError(f"feature width mismatch: train {train.features.shape} vs test {test.features.shape}")

    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0) + 1e-6
    x_train = (train.features - mean) / std
    x_test = (test.features - mean) / std
    y_train = np.searchsorted(classes, train.labels)

    rng = np.random.default_rng(seed)
    weight = np.zeros((train.dim, len(classes)))
    bias = np.zeros(len(classes))
    vel_w, vel_b = np.zeros_like(weight), np.zeros_like(bias)
    onehot = np.eye(len(classes))[y_train]

    for _ in range(epochs):
        order = rng.permutation(train.size)
        for start in range(0, train.size, batch_size):
            idx = order[start:start + batch_size]
            logits = x_train[idx] @ weight + bias
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            delta = (probs - onehot[idx]) / len(idx)
            vel_w = momentum * vel_w + x_train[idx].T @ delta
            vel_b = momentum * vel_b + delta.sum(axis=0)
            weight -= lr * vel_w
            bias -= lr * vel_b

    predicted = classes[np.argmax(x_test @ weight + bias, axis=1)]
    return float(np.mean(predicted == test.labels))


# ---------------------------------------------------------------- segmentation

def _relabel(labels: np.ndarray) -> np.ndarray:
    mapping = {}
    return np.array([mapping.setdefault(int(v), len(mapping)) for v in labels], dtype=np.int64)


def segment_image(latents, clusters: int) -> SegmentationMap:
    """Average-linkage, cosine-distance agglomerative clustering of patch latents.

    Labels are numbered by first appearance in patch order and laid out on
    the square grid when L is a perfect square.

    Raises:
        ConfigurationError: If ``clusters`` is outside [2, L].
    """
    z = np.asarray(getattr(latents, "data", latents), dtype=np.float64)
    length = len(z)
    if not 2 <= clusters <= length:
        raise ConfigurationError(f"clusters must lie in [2, {length}], got {clusters}", key="eval.clusters")
    if clusters == length:
        labels = np.arange(length, dtype=np.int64)
    else:
        tree = linkage(z, method="average", metric="cosine")
        labels = _relabel(cut_tree(tree, n_clusters=clusters).ravel())
    side = math.isqrt(length)
    if side * side == length:
        labels = labels.reshape(side, side)
    return SegmentationMap(labels=labels, clusters=clusters)


def patch_labels_from_mask(mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Majority region label of every patch of a canvas-sized 0/1 mask."""
    grid = mask.shape[0] // patch_size
    blocks = mask[:grid * patch_size, :grid * patch_size].reshape(grid, patch_size, grid, patch_size)
    return (blocks.mean(axis=(1, 3)) > 0.5).astype(np.int64)


def segmentation_ari(seg: SegmentationMap, truth: np.ndarray) -> float:
    """Adjusted Rand index between a segmentation and ground-truth patch labels."""
    return float(adjusted_rand_score(np.asarray(truth).ravel(), seg.labels.ravel()))


# ---------------------------------------------------------------- feature extraction

def patch_latents(encoder: EncoderParams, images: np.ndarray, patch_size: int) -> np.ndarray:
    """Encode every patch of a batch of normalised images (B x L x d)."""
    patch_sets = [extract_contiguous_grid(img, patch_size) for img in images]
    patches = np.stack([ps.patches for ps in patch_sets])
    positions = np.stack([ps.positions for ps in patch_sets])
    return encode(encoder, patches, positions).data


def iter_latents(
    encoder: EncoderParams, dataset: ImageDataset, canvas: int, patch_size: int, batch_size: int = 64
) -> Iterable[Tuple[np.ndarray, np.ndarray]]:
    """Yield ``(indices, B x L x d latents)`` over the dataset without augmentation."""
    rng = np.random.default_rng(0)
    for start in range(0, len(dataset), batch_size):
        indices = np.arange(start, min(start + batch_size, len(dataset)))
        images = prepare_batch(dataset, indices, canvas, rng, augment=False, dtype=encoder.dtype)
        yield indices, patch_latents(encoder, images, patch_size)


def extract_features(
    encoder: EncoderParams,
    dataset: ImageDataset,
    canvas: int,
    patch_size: int,
    pooling: PoolingKind = "topk",
    k: int = 10,
    batch_size: int = 64,
) -> FeatureBank:
    """Pooled frozen-encoder features for every image of ``dataset``."""
    pooled = [pool_features(z, pooling, k) for _, z in iter_latents(encoder, dataset, canvas, patch_size, batch_size)]
    features = np.concatenate(pooled).astype(np.float64)
    logger.debug("extracted %d x %d features (%s pooling)", *features.shape, pooling)
    return FeatureBank(features=features, labels=np.asarray(dataset.labels), pooling=pooling)


def segment_dataset(
    encoder: EncoderParams,
    dataset: ImageDataset,
    canvas: int,
    patch_size: int,
    clusters: int,
) -> Tuple[Sequence[SegmentationMap], Optional[float]]:
    """Segment every image; mean ARI against the masks when the dataset has them."""
    maps, scores = [], []
    for indices, latents in iter_latents(encoder, dataset, canvas, patch_size):
        for index, z in zip(indices, latents):
            seg = segment_image(z, clusters)
            maps.append(seg)
            if dataset.masks is not None:
                truth = patch_labels_from_mask(resize_mask(dataset.masks[index], canvas), patch_size)
                scores.append(segmentation_ari(seg, truth))
    return maps, (float(np.mean(scores)) if scores else None)


# ---------------------------------------------------------------- artifacts

def save_feature_bank(bank: FeatureBank, path, digest: bytes) -> Path:
    ckpt = Checkpoint(digest=digest, step=0)
    ckpt.tensors["features"] = bank.features
    ckpt.tensors["labels"] = bank.labels.astype(np.int64)
    ckpt.put_text("pooling", bank.pooling)
    return save_checkpoint(ckpt, path)


def load_feature_bank(path) -> FeatureBank:
    ckpt = load_checkpoint(path)
    return FeatureBank(features=ckpt.tensors["features"], labels=ckpt.tensors["labels"], pooling=ckpt.text("pooling"))


def write_segmentations(maps: Sequence[SegmentationMap], out_dir) -> Path:
    """One PGM label image per map plus ``segments.csv`` (image, patch, row, col, cluster).

    Raises:
        DataIOError: If the directory cannot be written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "segments.csv", "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["image", "patch", "row", "col", "cluster"])
            for i, seg in enumerate(maps):
                labels = seg.labels if seg.labels.ndim == 2 else seg.labels[None, :]
                scale = 255 // max(seg.clusters - 1, 1)
                Image.fromarray((labels * scale).astype(np.uint8)).save(out / f"seg_{i:05d}.pgm", format="PPM")
                for patch, (row, col) in enumerate(np.ndindex(labels.shape)):
                    writer.writerow([i, patch, row, col, int(labels[row, col])])
    except OSError as e:
        raise DataIOError(f"cannot write segmentation maps to {out}: {e}") from e
    return out
