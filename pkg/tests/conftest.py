import os
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault("ADVFORGE_DATA_DIR", str(ROOT / "data" / "mnist"))
sys.path.insert(0, str(Path(__file__).parent))

import desk  # noqa: E402

from advforge import nn  # noqa: E402

needs_mnist = pytest.mark.skipif(not desk.have_mnist(), reason="MNIST IDX files not found (set ADVFORGE_DATA_DIR)")


@pytest.fixture(scope="session")
def small_net():
    """Untrained LeNet with He-initialised weights; fine for calculus checks."""
    return nn.lenet(10, seed=3)


@pytest.fixture(scope="session")
def victim():
    if not desk.have_mnist():
        pytest.skip("MNIST IDX files not found")
    net, info = desk.model()
    return net


@pytest.fixture(scope="session")
def mnist_test():
    if not desk.have_mnist():
        pytest.skip("MNIST IDX files not found")
    from advforge import data

    return data.load_mnist("test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if desk.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(desk.ACCEPTANCE):
            terminalreporter.write_line(desk.ACCEPTANCE[k])
