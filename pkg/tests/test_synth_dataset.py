import numpy as np
import pytest
from scipy.stats import f_oneway

from app.errors import ConfigurationError, DataIOError
from app.services.dataset import (
    ImageDataset,
    load_dataset,
    normalize,
    prepare_batch,
    resize_mask,
    resolve_dataset,
)
from app.services.synth import INDEX_FILE, textured_shapes, two_textures, write_dataset

from conftest import tiny_run


def test_textured_shapes_is_deterministic():
    a = textured_shapes(classes=4, count=12, size=24, seed=3)
    b = textured_shapes(classes=4, count=12, size=24, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = textured_shapes(classes=4, count=12, size=24, seed=4)
    assert not np.array_equal(a.images, c.images)


def test_written_directories_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        write_dataset(tmp_path / name, textured_shapes(classes=3, count=6, size=16, seed=1))
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert INDEX_FILE in files and len(files) == 7
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_classes_are_balanced():
    data = textured_shapes(classes=10, count=1000, size=16, seed=0)
    assert data.images.shape == (1000, 16, 16, 3)
    assert data.images.dtype == np.uint8
    np.testing.assert_array_equal(np.bincount(data.labels), np.full(10, 100))


def test_image_statistics_depend_on_the_class():
    data = textured_shapes(classes=10, count=1000, size=32, seed=0)
    means = data.images.reshape(len(data.images), -1, 3).mean(axis=1)
    for channel in range(3):
        groups = [means[data.labels == c, channel] for c in range(10)]
        assert f_oneway(*groups).pvalue < 0.01


def test_generator_argument_errors():
    with pytest.raises(ConfigurationError):
        textured_shapes(classes=0, count=5)
    with pytest.raises(ConfigurationError):
        two_textures(count=0)


def test_two_textures_masks():
    data = two_textures(count=8, size=32, seed=2)
    assert data.masks.shape == (8, 32, 32)
    assert set(np.unique(data.masks)) <= {0, 1}
    assert set(np.unique(data.labels)) <= {0, 1}


def test_written_dataset_loads_back(tmp_path):
    data = two_textures(count=5, size=16, seed=0)
    loaded = load_dataset(write_dataset(tmp_path / "seg", data))
    assert len(loaded) == 5 and loaded.channels == 3
    np.testing.assert_array_equal(np.stack(loaded.images), data.images)
    np.testing.assert_array_equal(loaded.labels, data.labels)
    np.testing.assert_array_equal(np.stack(loaded.masks), data.masks)


def test_missing_or_broken_directory(tmp_path):
    with pytest.raises(DataIOError):
        load_dataset(tmp_path / "absent")
    (tmp_path / "broken").mkdir()
    (tmp_path / "broken" / INDEX_FILE).write_text("filename,label\nnope.ppm,0\n")
    with pytest.raises(DataIOError):
        load_dataset(tmp_path / "broken")


def test_resolve_dataset_checks_channels(tmp_path):
    cfg = tiny_run().train
    assert len(resolve_dataset(cfg, channels=3)) == cfg.synthetic_count
    with pytest.raises(ConfigurationError) as info:
        resolve_dataset(cfg, channels=1)
    assert info.value.key == "model.channels"


def test_prepare_batch_shape_and_normalisation(tiny_dataset, rng):
    batch = prepare_batch(tiny_dataset, [0, 1, 2], canvas=8, rng=rng)
    assert batch.shape == (3, 8, 8, 3) and batch.dtype == np.float32
    assert batch.min() >= -2.0 and batch.max() <= 2.0
    plain = prepare_batch(tiny_dataset, [0], canvas=16, rng=rng, augment=False, dtype=np.float64)
    np.testing.assert_allclose(plain[0], normalize(tiny_dataset.images[0], np.float64))


def test_normalize_constants():
    np.testing.assert_allclose(normalize(np.array([0, 255], dtype=np.uint8)), [-2.0, 2.0])


def test_split_is_seeded_and_disjoint(tiny_dataset):
    train, test = tiny_dataset.split(0.25, seed=1)
    again, _ = tiny_dataset.split(0.25, seed=1)
    assert (len(train), len(test)) == (18, 6)
    np.testing.assert_array_equal(train.labels, again.labels)
    seen = {img.tobytes() for img in train.images}
    assert not any(img.tobytes() in seen for img in test.images)


def test_resize_mask_keeps_binary_values():
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[:, 8:] = 1
    small = resize_mask(mask, 8)
    assert small.shape == (8, 8)
    np.testing.assert_array_equal(small[:, 4:], 1)
    np.testing.assert_array_equal(small[:, :4], 0)


def test_subset_keeps_masks():
    data = two_textures(count=4, size=8, seed=0)
    ds = ImageDataset(images=list(data.images), labels=data.labels, masks=list(data.masks))
    part = ds.subset([2, 0])
    np.testing.assert_array_equal(part.masks[0], data.masks[2])
