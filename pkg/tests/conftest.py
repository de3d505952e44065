import os

import pytest

MNIST_DIR = os.environ.get("DIVIL_MNIST_DIR", "")


@pytest.fixture(scope="session")
def mnist_dir():
    if not MNIST_DIR or not os.path.isdir(MNIST_DIR):
        pytest.skip("set DIVIL_MNIST_DIR to the MNIST IDX directory")
    return MNIST_DIR


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    from divil.data import load_mnist

    return load_mnist(mnist_dir)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
