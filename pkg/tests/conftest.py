from pathlib import Path

import pytest

from flatcomp.data import load_mnist_dir

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist5k"


@pytest.fixture(scope="session")
def mnist_train():
    return load_mnist_dir(MNIST_DIR, "train")


@pytest.fixture(scope="session")
def mnist_test():
    return load_mnist_dir(MNIST_DIR, "test")


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
