"""
Dataset ingestion: MNIST (IDX files), CIFAR-10 (binary batches) and a
synthetic set for smoke runs. Images come out as float (N, C, H, W) in
[0, 1]; standardize() then applies per-channel train statistics.
"""

import gzip
import logging
import os
import struct
from dataclasses import asdict, dataclass, replace

import numpy as np

from ctensor import float_dtype
from errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_CLASSES = 10
DATASETS = ('mnist', 'cifar10', 'synthetic')

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}
CIFAR_FILES = {
    'train': [f"data_batch_{i}.bin" for i in range(1, 6)],
    'test': ['test_batch.bin'],
}


@dataclass(frozen=True)
class DataConfig:
    dataset: str = 'mnist'
    path: str = 'data/mnist'
    augment: bool = False
    train_limit: int = 0
    test_limit: int = 0

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset '{self.dataset}', expected one of {DATASETS}")
        if self.train_limit < 0 or self.test_limit < 0:
            raise ConfigError("train_limit and test_limit must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    name: str = ''

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes}), got [{self.labels.min()}, {self.labels.max()}]")

    def __len__(self):
        return len(self.labels)

    def limit(self, count):
        """First `count` samples; 0 keeps everything"""
        if count <= 0 or count >= len(self):
            return self
        return replace(self, images=self.images[:count], labels=self.labels[:count])


def _read_bytes(path):
    """Raw file bytes, transparently decompressing a .gz sibling"""
    if os.path.exists(path):
        with open(path, 'rb') as f:
            return f.read()
    if os.path.exists(path + '.gz'):
        with gzip.open(path + '.gz', 'rb') as f:
            return f.read()
    raise DataError(f"missing data file {path}")


def parse_idx(raw, expected_magic, source='<bytes>'):
    """Parse one IDX file: big-endian magic, big-endian u32 dims, then unsigned bytes"""
    if len(raw) < 8:
        raise DataError(f"{source}: truncated header, {len(raw)} bytes at offset 0")
    magic, = struct.unpack_from('>I', raw, 0)
    if magic != expected_magic:
        raise DataError(f"{source}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{source}: truncated header, dims end at offset {header} but file has {len(raw)} bytes")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise DataError(f"{source}: truncated payload at offset {len(raw)}, expected {header + size} bytes")
    if len(raw) > header + size:
        raise DataError(f"{source}: {len(raw) - header - size} trailing bytes at offset {header + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_mnist(path, split='train'):
    if split not in MNIST_FILES:
        raise ConfigError(f"unknown split '{split}'")
    image_file, label_file = (os.path.join(path, name) for name in MNIST_FILES[split])
    images = parse_idx(_read_bytes(image_file), IDX_IMAGES_MAGIC, image_file)
    labels = parse_idx(_read_bytes(label_file), IDX_LABELS_MAGIC, label_file)
    if images.ndim != 3 or labels.ndim != 1:
        raise DataError(f"MNIST {split}: unexpected ranks {images.ndim} and {labels.ndim}")
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"MNIST {split}: {images.shape[0]} images but {labels.shape[0]} labels")
    logger.info(f"📂 MNIST {split}: {images.shape[0]} images {images.shape[1]}x{images.shape[2]}")
    pixels = (images[:, None].astype(float_dtype()) / 255.0).astype(float_dtype())
    return Dataset(pixels, labels.astype(np.int64), split, 10, 'mnist')


def parse_cifar_records(raw, source='<bytes>'):
    """1 label byte + 3072 pixel bytes (R, G, B planes, row-major) per record"""
    if len(raw) % CIFAR_RECORD:
        raise DataError(f"{source}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{source}: label {labels[i]} out of range in record {i} at offset {i * CIFAR_RECORD}")
    return records[:, 1:].reshape((-1,) + CIFAR_SHAPE), labels


def load_cifar10(path, split='train'):
    if split not in CIFAR_FILES:
        raise ConfigError(f"unknown split '{split}'")
    images, labels = [], []
    for name in CIFAR_FILES[split]:
        file_path = os.path.join(path, name)
        x, y = parse_cifar_records(_read_bytes(file_path), file_path)
        images.append(x)
        labels.append(y)
    images = np.concatenate(images)
    logger.info(f"📂 CIFAR-10 {split}: {images.shape[0]} images")
    pixels = (images.astype(float_dtype()) / 255.0).astype(float_dtype())
    return Dataset(pixels, np.concatenate(labels), split, CIFAR_CLASSES, 'cifar10')


def make_synthetic(count, num_classes=10, channels=1, size=12, seed=0, split='train', noise=0.15):
    """Noisy class prototypes in [0, 1]; learnable in a few epochs"""
    # prototypes depend on the seed only, so train and test splits share them
    prototypes = np.random.default_rng(seed).uniform(0.0, 1.0, size=(num_classes, channels, size, size))
    rng = np.random.default_rng([seed, 0 if split == 'train' else 1])
    labels = np.arange(count, dtype=np.int64) % num_classes
    rng.shuffle(labels)
    images = prototypes[labels] + rng.normal(0.0, noise, size=(count, channels, size, size))
    images = np.clip(images, 0.0, 1.0).astype(float_dtype())
    return Dataset(images, labels, split, num_classes, 'synthetic')


def channel_stats(dataset):
    mean = dataset.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = dataset.images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, np.maximum(std, 1e-8)


def standardize(dataset, mean, std):
    m = mean.reshape(1, -1, 1, 1)
    s = std.reshape(1, -1, 1, 1)
    return replace(dataset, images=((dataset.images - m) / s).astype(float_dtype()))


def augment_batch(images, rng, pad=4):
    """Random crop from a zero-padded image plus random horizontal flip"""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def iter_batches(dataset, batch_size, rng=None, augment=False):
    """
    Yield (images, labels) batches; shuffled when an rng is given, in order otherwise.
    A lone trailing sample joins the batch before it.
    """
    order = rng.permutation(len(dataset)) if rng is not None else np.arange(len(dataset))
    starts = list(range(0, len(order), batch_size))
    if len(starts) > 1 and len(order) - starts[-1] == 1:
        starts.pop()
    for i, start in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else len(order)
        idx = order[start:stop]
        images = dataset.images[idx]
        if augment and rng is not None:
            images = augment_batch(images, rng)
        yield images, dataset.labels[idx]


def load_dataset(data_config, model_spec=None):
    """Train and test splits for a DataConfig, standardized with train statistics"""
    kind = data_config.dataset
    if kind == 'mnist':
        train, test = load_mnist(data_config.path, 'train'), load_mnist(data_config.path, 'test')
    elif kind == 'cifar10':
        train, test = load_cifar10(data_config.path, 'train'), load_cifar10(data_config.path, 'test')
    else:
        classes = model_spec.num_classes if model_spec else 10
        channels = model_spec.in_channels if model_spec else 1
        train = make_synthetic(data_config.train_limit or 1000, classes, channels, split='train')
        test = make_synthetic(data_config.test_limit or 200, classes, channels, split='test')
    train = train.limit(data_config.train_limit)
    test = test.limit(data_config.test_limit)
    if model_spec is not None:
        if train.images.shape[1] != model_spec.in_channels:
            raise ConfigError(f"{kind} has {train.images.shape[1]} channels, model expects {model_spec.in_channels}")
        if train.num_classes != model_spec.num_classes:
            raise ConfigError(f"{kind} has {train.num_classes} classes, model expects {model_spec.num_classes}")
    mean, std = channel_stats(train)
    return standardize(train, mean, std), standardize(test, mean, std)
