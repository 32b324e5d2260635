import gzip
import os
import struct
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from ctensor import ComplexTensor, set_float_dtype  # noqa: E402
from datasets import channel_stats, make_synthetic, standardize  # noqa: E402

MNIST_DIR = os.environ.get('BCNN_MNIST_DIR', os.path.join(os.path.dirname(os.path.abspath(__file__)), 'data', 'mnist'))


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run desk-scale acceptance tests')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale training and benchmark checks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    previous = set_float_dtype(np.float64)
    yield np.float64
    set_float_dtype(previous)


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)


def numeric_grad(loss, array, h=1e-5):
    """Central differences of loss() w.r.t. every element of `array`, perturbed in place"""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = loss()
        flat[i] = saved - h
        minus = loss()
        flat[i] = saved
        out[i] = (plus - minus) / (2 * h)
    return grad


class GradCheck:
    """Projects a layer output on a fixed random tensor so the check has a scalar loss"""

    def __init__(self, layer, x, rng):
        self.layer = layer
        self.x = x
        out = layer.forward(x)
        data = out.data if isinstance(out, ComplexTensor) else out
        self.projection = rng.normal(size=data.shape)
        self.complex_out = isinstance(out, ComplexTensor)

    def loss(self):
        out = self.layer.forward(self.x)
        data = out.data if isinstance(out, ComplexTensor) else out
        return float((data * self.projection).sum())

    def analytic(self):
        self.layer.forward(self.x)
        grad = ComplexTensor(self.projection.copy()) if self.complex_out else self.projection.copy()
        dx = self.layer.backward(grad)
        return dx.data if isinstance(dx, ComplexTensor) else dx

    def input_error(self):
        dx = self.analytic()
        x_data = self.x.data if isinstance(self.x, ComplexTensor) else self.x
        return rel_error(dx, numeric_grad(self.loss, x_data))

    def param_errors(self):
        self.analytic()
        analytic = {p.name: p.grad.copy() for p in self.layer.parameters()}
        return {p.name: rel_error(analytic[p.name], numeric_grad(self.loss, p.value))
                for p in self.layer.parameters()}


@pytest.fixture
def grad_check(rng):
    return lambda layer, x: GradCheck(layer, x, rng)


@pytest.fixture
def synthetic_splits():
    train = make_synthetic(200, num_classes=10, channels=1, size=12, seed=3, split='train')
    test = make_synthetic(60, num_classes=10, channels=1, size=12, seed=3, split='test')
    mean, std = channel_stats(train)
    return standardize(train, mean, std), standardize(test, mean, std)


def write_idx(path, array, magic, compress=False):
    array = np.asarray(array, dtype=np.uint8)
    raw = struct.pack('>I', magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    opener = gzip.open if compress else open
    with opener(str(path) + ('.gz' if compress else ''), 'wb') as f:
        f.write(raw)
    return raw


@pytest.fixture
def mnist_dir(tmp_path, rng):
    """Tiny MNIST-layout directory: 30 train and 10 test images of 28x28"""
    for split, count in (('train', 30), ('t10k', 10)):
        images = rng.integers(0, 256, size=(count, 28, 28))
        labels = np.arange(count) % 10
        write_idx(tmp_path / f"{split}-images-idx3-ubyte", images, 0x803)
        write_idx(tmp_path / f"{split}-labels-idx1-ubyte", labels, 0x801, compress=split == 't10k')
    return tmp_path


def cifar_bytes(labels, rng):
    records = []
    for label in labels:
        records.append(bytes([label]) + rng.integers(0, 256, size=3072).astype(np.uint8).tobytes())
    return b''.join(records)


@pytest.fixture
def cifar_dir(tmp_path, rng):
    for i in range(1, 6):
        (tmp_path / f"data_batch_{i}.bin").write_bytes(cifar_bytes([(i + k) % 10 for k in range(4)], rng))
    (tmp_path / 'test_batch.bin').write_bytes(cifar_bytes(list(range(10)), rng))
    return tmp_path
