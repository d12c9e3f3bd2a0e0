import gzip
import struct

import numpy as np
import pytest

from bitswitcher.data import (
    IMAGE_MAGIC, LABEL_MAGIC, Dataset, iterate_batches, load_dataset_cache, load_datasets, load_idx_pair,
    parse_idx, save_dataset, stratified_subset, summary_rows, synthetic_dataset,
)
from bitswitcher.errors import ConsistencyError, DomainError, FormatError, LengthError
from bitswitcher.tensor import RngStreams

PIXELS = bytes([0, 255, 128, 64, 1, 2, 3, 4])


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload


@pytest.fixture
def idx_pair(tmp_path):
    images = tmp_path / "images-idx3-ubyte"
    labels = tmp_path / "labels-idx1-ubyte"
    images.write_bytes(idx_bytes(IMAGE_MAGIC, (2, 2, 2), PIXELS))
    labels.write_bytes(idx_bytes(LABEL_MAGIC, (2,), bytes([7, 3])))
    return images, labels


def test_parse_two_images(idx_pair):
    images, labels = idx_pair
    parsed = parse_idx(images, IMAGE_MAGIC)
    assert parsed.dims == (2, 2, 2)
    np.testing.assert_array_equal(parsed.data, np.array(list(PIXELS), dtype=np.uint8).reshape(2, 2, 2))
    np.testing.assert_array_equal(parse_idx(labels, LABEL_MAGIC).data, [7, 3])


def test_load_pair_normalizes(idx_pair):
    dataset = load_idx_pair(*idx_pair, mean=0.0, std=1.0)
    assert dataset.images.shape == (2, 1, 2, 2)
    assert dataset.images.dtype == np.float32
    np.testing.assert_allclose(dataset.images[0, 0], [[0.0, 1.0], [128 / 255, 64 / 255]], rtol=1e-6)
    np.testing.assert_array_equal(dataset.labels, [7, 3])


def test_label_outside_the_classes_is_a_format_error(idx_pair):
    with pytest.raises(FormatError, match="label 7"):
        load_idx_pair(*idx_pair, classes=5)
    assert len(load_idx_pair(*idx_pair, classes=8)) == 2


def test_gzip_is_read_transparently(tmp_path):
    path = tmp_path / "images-idx3-ubyte.gz"
    with gzip.open(path, "wb") as handle:
        handle.write(idx_bytes(IMAGE_MAGIC, (2, 2, 2), PIXELS))
    assert parse_idx(path, IMAGE_MAGIC).data.sum() == sum(PIXELS)


def test_short_file(tmp_path):
    path = tmp_path / "short"
    path.write_bytes(struct.pack(">I", IMAGE_MAGIC))
    with pytest.raises(LengthError):
        parse_idx(path, IMAGE_MAGIC)
    path.write_bytes(b"\0\0")
    with pytest.raises(FormatError):
        parse_idx(path)


def test_wrong_magic(tmp_path):
    path = tmp_path / "labels"
    path.write_bytes(idx_bytes(LABEL_MAGIC, (2,), bytes([1, 2])))
    with pytest.raises(FormatError) as info:
        parse_idx(path, IMAGE_MAGIC)
    assert "expected magic 2051, got 2049" in str(info.value)
    path.write_bytes(idx_bytes(0x00000D01, (2,), bytes(8)))
    with pytest.raises(FormatError):
        parse_idx(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "images"
    path.write_bytes(idx_bytes(IMAGE_MAGIC, (2, 2, 2), PIXELS[:5]))
    with pytest.raises(LengthError):
        parse_idx(path, IMAGE_MAGIC)


def test_count_mismatch(tmp_path, idx_pair):
    images, _ = idx_pair
    labels = tmp_path / "three-labels"
    labels.write_bytes(idx_bytes(LABEL_MAGIC, (3,), bytes([1, 2, 3])))
    with pytest.raises(ConsistencyError):
        load_idx_pair(images, labels)


def test_load_datasets_from_directory(tmp_path):
    for stem in ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte"):
        (tmp_path / stem).write_bytes(idx_bytes(IMAGE_MAGIC, (2, 2, 2), PIXELS))
    for stem in ("train-labels-idx1-ubyte", "t10k-labels-idx1-ubyte"):
        (tmp_path / stem).write_bytes(idx_bytes(LABEL_MAGIC, (2,), bytes([0, 1])))
    train, test = load_datasets("idx", str(tmp_path))
    assert len(train) == len(test) == 2
    with pytest.raises(FormatError):
        load_datasets("idx", str(tmp_path / "missing"))
    with pytest.raises(DomainError):
        load_datasets("cifar")


def test_synthetic_task_is_deterministic_and_balanced():
    a, _ = load_datasets("synthetic", classes=10, train_samples=200, test_samples=50,
                         rng=RngStreams(4).get("data"))
    b, _ = load_datasets("synthetic", classes=10, train_samples=200, test_samples=50,
                         rng=RngStreams(4).get("data"))
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (200, 1, 28, 28)
    assert set(a.class_counts().values()) == {20}
    with pytest.raises(DomainError):
        synthetic_dataset(np.random.default_rng(0), 1, 10)


def test_dataset_length_check():
    with pytest.raises(ConsistencyError):
        Dataset(np.zeros((3, 1, 2, 2)), np.zeros(2, dtype=np.int64), 2)


def test_stratified_subset(tiny_data):
    train, _ = tiny_data
    subset = stratified_subset(train, 0.25, np.random.default_rng(0))
    assert subset.class_counts() == {0: 4, 1: 4, 2: 4}
    with pytest.raises(DomainError):
        stratified_subset(train, 0.0, np.random.default_rng(0))


def test_iterate_batches_covers_every_sample(tiny_data):
    train, _ = tiny_data
    batches = list(iterate_batches(train, 20, np.random.default_rng(0)))
    assert [len(y) for _, y in batches] == [20, 20, 8]
    assert sorted(np.concatenate([y for _, y in batches]).tolist()) == sorted(train.labels.tolist())
    ordered = list(iterate_batches(train, 48))
    np.testing.assert_array_equal(ordered[0][1], train.labels)


def test_cache_and_summary(tiny_data, tmp_path):
    train, test = tiny_data
    path = save_dataset(train, test, tmp_path / "dataset.npz")
    loaded_train, loaded_test = load_dataset_cache(path)
    np.testing.assert_array_equal(loaded_train.images, train.images)
    np.testing.assert_array_equal(loaded_test.labels, test.labels)
    rows = summary_rows(train, test)
    assert len(rows) == 6
    assert rows[0] == {"split": "train", "class": 0, "count": 16}
    with pytest.raises(FormatError):
        load_dataset_cache(tmp_path / "missing.npz")
