import os
from pathlib import Path

import numpy as np
import pytest

from qinfer.data import LabeledDataset, Shard

MNIST_DIR = Path(os.environ.get("QINFER_MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").is_file()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_dir():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR} (set QINFER_MNIST_DIR)")
    return MNIST_DIR


def blob_dataset(n_per_class=40, dim=6, classes=3, seed=0, spread=0.15) -> LabeledDataset:
    """Linearly separable gaussian blobs squeezed into [0, 1]."""
    g = np.random.default_rng(seed)
    centers = g.uniform(0.2, 0.8, size=(classes, dim))
    x = np.concatenate([c + spread * g.standard_normal((n_per_class, dim)) for c in centers])
    y = np.repeat(np.arange(classes), n_per_class)
    order = g.permutation(len(y))
    return LabeledDataset(np.clip(x[order], 0, 1), y[order], classes)


def as_shard(ds: LabeledDataset, owner=1) -> Shard:
    return Shard(ds.features, ds.labels, ds.num_classes, owner=owner)


@pytest.fixture
def blobs():
    return blob_dataset()


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(RESULTS, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
