"""
Datasets: IDX files (optionally gzip-compressed) and a synthetic stand-in.

IDX layout, all integers big-endian::

    0000  32 bit integer  0x00000803 (2051)  magic number of an image file
    0004  32 bit integer  N                  number of images
    0008  32 bit integer  rows
    0012  32 bit integer  columns
    0016  unsigned byte   ...                pixels

Label files carry magic 0x00000801 (2049), one dimension, one byte per label.
"""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import ConsistencyError, DomainError, FormatError, LengthError

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
UBYTE_TYPE = 0x08
IMAGE_SHAPE = (1, 28, 28)

DEFAULT_MEAN = 0.1307
DEFAULT_STD = 0.3081

# File stems looked up under dataset.path
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

BLOB_SIGMA = 3.0
BLOBS_PER_CLASS = 2


@dataclass
class Dataset:
    """Images of shape (N, 1, 28, 28) as float32 and integer labels."""
    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.classes)

    def class_counts(self) -> Dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.classes)
        return {c: int(n) for c, n in enumerate(counts)}


@dataclass
class IdxArray:
    magic: int
    dims: Tuple[int, ...]
    data: np.ndarray


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def parse_idx(path: Union[str, Path], expected_magic: Optional[int] = None) -> IdxArray:
    """
    Reads one IDX file of unsigned bytes.

    Args:
        path (str | Path): File path; a ``.gz`` suffix is decompressed.
        expected_magic (int, optional): 2051 for images, 2049 for labels.

    Returns:
        IdxArray: Magic number, dimension sizes and the uint8 payload.

    Raises:
        FormatError: Wrong or unsupported magic number.
        LengthError: Header or payload shorter than announced.
    """
    path = Path(path)
    try:
        with _open(path) as handle:
            raw = handle.read()
    except (OSError, EOFError) as e:
        raise FormatError(f"cannot read IDX file {path}: {e}") from e
    if len(raw) < 4:
        raise LengthError(f"{path.name}: {len(raw)} bytes is too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path.name}: expected magic {expected_magic}, got {magic}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != UBYTE_TYPE:
        raise FormatError(f"{path.name}: unsupported IDX magic {magic}")
    ndims = magic & 0xFF
    header_size = 4 + 4 * ndims
    if len(raw) < header_size:
        raise LengthError(f"{path.name}: header announces {ndims} dimensions but the file has {len(raw)} bytes")
    dims = struct.unpack(f">{ndims}I", raw[4:header_size])
    count = int(np.prod(dims, dtype=np.int64))
    payload = raw[header_size:]
    if len(payload) < count:
        raise LengthError(f"{path.name}: expected {count} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)
    return IdxArray(magic, tuple(dims), data)


def normalize(pixels: np.ndarray, mean: float = DEFAULT_MEAN, std: float = DEFAULT_STD) -> np.ndarray:
    """Scales bytes to [0, 1] and standardizes with the given channel statistics."""
    if std <= 0:
        raise DomainError(f"normalization std must be positive, got {std}")
    return ((pixels.astype(np.float32) / 255.0 - mean) / std).astype(np.float32)


def load_idx_pair(images_path: Union[str, Path], labels_path: Union[str, Path], mean: float = DEFAULT_MEAN,
                  std: float = DEFAULT_STD, classes: int = 10) -> Dataset:
    """
    Loads matching image and label IDX files.

    Raises:
        ConsistencyError: If image and label counts differ.
        FormatError: If a label lies outside [0, classes).
    """
    images = parse_idx(images_path, IMAGE_MAGIC)
    labels = parse_idx(labels_path, LABEL_MAGIC)
    if images.dims[0] != labels.dims[0]:
        raise ConsistencyError(f"{Path(images_path).name} holds {images.dims[0]} images but "
                               f"{Path(labels_path).name} holds {labels.dims[0]} labels")
    if labels.data.size and int(labels.data.max()) >= classes:
        raise FormatError(f"{Path(labels_path).name} holds label {int(labels.data.max())}, "
                          f"expected labels below {classes}")
    rows, cols = images.dims[1], images.dims[2]
    pixels = normalize(images.data, mean, std).reshape(-1, 1, rows, cols)
    logging.info(f"Loaded {len(pixels)} samples of {rows}x{cols} from {images_path}")
    return Dataset(pixels, labels.data.astype(np.int64), classes)


def _find_idx(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FormatError(f"missing IDX file {stem}[.gz] in {directory}")


def synthetic_prototypes(rng: np.random.Generator, n_classes: int,
                         shape: Tuple[int, int] = IMAGE_SHAPE[1:]) -> np.ndarray:
    """One Gaussian-blob pattern in [0, 1] per class."""
    if n_classes < 2:
        raise DomainError(f"need at least two classes, got {n_classes}")
    rows, cols = shape
    yy, xx = np.mgrid[0:rows, 0:cols]
    prototypes = np.zeros((n_classes, rows, cols), dtype=np.float64)
    for c in range(n_classes):
        for _ in range(BLOBS_PER_CLASS):
            cy, cx = rng.uniform(4, rows - 4), rng.uniform(4, cols - 4)
            prototypes[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * BLOB_SIGMA ** 2))
        prototypes[c] /= prototypes[c].max()
    return prototypes


def synthetic_dataset(rng: np.random.Generator, n_classes: int, n_samples: int, noise: float = 0.35,
                      prototypes: Optional[np.ndarray] = None) -> Dataset:
    """
    Class-conditional blob images with additive Gaussian noise.

    Labels are balanced and shuffled. Pass the same ``prototypes`` to draw
    train and test splits of one task.

    Args:
        rng (np.random.Generator): Data stream.
        n_classes (int): Number of classes, at least 2.
        n_samples (int): Number of samples.
        noise (float): Standard deviation of the pixel noise.
        prototypes (np.ndarray, optional): Class patterns (n_classes, 28, 28).
    """
    if n_classes < 2:
        raise DomainError(f"need at least two classes, got {n_classes}")
    if n_samples < 0:
        raise DomainError(f"sample count must be non-negative, got {n_samples}")
    if prototypes is None:
        prototypes = synthetic_prototypes(rng, n_classes)
    labels = rng.permutation(np.arange(n_samples) % n_classes).astype(np.int64)
    images = prototypes[labels] + noise * rng.standard_normal((n_samples,) + prototypes.shape[1:])
    return Dataset(images.astype(np.float32)[:, None], labels, n_classes)


def load_datasets(kind: str, path: str = "", classes: int = 10, train_samples: int = 6000,
                  test_samples: int = 1000, noise: float = 0.35, mean: float = DEFAULT_MEAN,
                  std: float = DEFAULT_STD, rng: Optional[np.random.Generator] = None) -> Tuple[Dataset, Dataset]:
    """
    Returns (train, test) for dataset.kind ``idx`` or ``synthetic``.

    IDX files are read from ``path`` (train-images-idx3-ubyte and friends,
    optionally gzip-compressed); the synthetic task is drawn from ``rng``.
    """
    if kind == "idx":
        if not path:
            raise FormatError("dataset.kind = idx needs dataset.path")
        directory = Path(path)
        splits = []
        for split in ("train", "test"):
            images_stem, labels_stem = IDX_FILES[split]
            splits.append(load_idx_pair(_find_idx(directory, images_stem), _find_idx(directory, labels_stem),
                                        mean, std, classes))
        return splits[0], splits[1]
    if kind == "synthetic":
        if rng is None:
            raise DomainError("the synthetic dataset needs a random stream")
        prototypes = synthetic_prototypes(rng, classes)
        train = synthetic_dataset(rng, classes, train_samples, noise, prototypes)
        test = synthetic_dataset(rng, classes, test_samples, noise, prototypes)
        logging.info(f"Generated synthetic task: {classes} classes, {train_samples}/{test_samples} samples, "
                     f"noise {noise}")
        return train, test
    raise DomainError(f"unknown dataset kind '{kind}', expected idx or synthetic")


def stratified_subset(dataset: Dataset, fraction: float, rng: np.random.Generator) -> Dataset:
    """
    Samples ``fraction`` of every class (at least one sample per present class).

    Indices are returned in ascending order.
    """
    if not 0 < fraction <= 1:
        raise DomainError(f"subset fraction must lie in (0, 1], got {fraction}")
    chosen: List[np.ndarray] = []
    for c in range(dataset.classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) == 0:
            continue
        take = max(1, int(round(fraction * len(members))))
        chosen.append(rng.choice(members, size=take, replace=False))
    indices = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    return dataset.subset(indices)


def iterate_batches(dataset: Dataset, batch_size: int,
                    rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yields (images, labels) mini-batches, shuffled when ``rng`` is given."""
    if batch_size < 1:
        raise DomainError(f"batch size must be positive, got {batch_size}")
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def save_dataset(train: Dataset, test: Dataset, path: Union[str, Path]) -> Path:
    """Writes both splits to one compressed npz cache."""
    path = Path(path)
    np.savez_compressed(path, train_images=train.images, train_labels=train.labels,
                        test_images=test.images, test_labels=test.labels, classes=np.array(train.classes))
    return path


def load_dataset_cache(path: Union[str, Path]) -> Tuple[Dataset, Dataset]:
    try:
        with np.load(path) as cache:
            classes = int(cache["classes"])
            return (Dataset(cache["train_images"], cache["train_labels"], classes),
                    Dataset(cache["test_images"], cache["test_labels"], classes))
    except (OSError, KeyError, ValueError) as e:
        raise FormatError(f"cannot read dataset cache {path}: {e}") from e


def summary_rows(train: Dataset, test: Dataset) -> List[Dict]:
    """Per-split, per-class sample counts."""
    rows = []
    for split, dataset in (("train", train), ("test", test)):
        for c, count in dataset.class_counts().items():
            rows.append({"split": split, "class": c, "count": count})
    return rows
