import sys
from pathlib import Path

import numpy as np
import pytest

from subnetens.data import DatasetSpec, load_dataset

ROOT = Path(__file__).resolve().parents[1]
MNIST_DIR = ROOT / "data" / "mnist5k"


def mnist_spec(**kw) -> DatasetSpec:
    return DatasetSpec(
        source="idx_images",
        train_images="train-images-idx3-ubyte.gz",
        train_labels="train-labels-idx1-ubyte.gz",
        test_images="t10k-images-idx3-ubyte.gz",
        test_labels="t10k-labels-idx1-ubyte.gz",
        base_dir=str(MNIST_DIR),
        mean=(0.1307,),
        std=(0.3081,),
        **kw,
    )


@pytest.fixture(scope="session")
def mnist():
    return load_dataset(mnist_spec())


@pytest.fixture(scope="session")
def blobs():
    return load_dataset(DatasetSpec(n_classes=3, dim=8, cluster_std=1.5, center_distance=4.0, n_samples=600, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
