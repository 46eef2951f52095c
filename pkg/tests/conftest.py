import os

# replay bit-identity is promised for single-thread BLAS
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from medistill.autodiff import numeric_mode  # noqa: E402
from medistill.config import toy_config  # noqa: E402
from medistill.data import collate, generate_dataset  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(autouse=True)
def verify_mode():
    """Every test starts in 64-bit mode with gradients enabled."""
    with numeric_mode("verify"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data():
    return generate_dataset(seed=0, n_train=96, n_eval=16)


@pytest.fixture
def small_config():
    """2-layer MED on 16px images (4x4 patches) small enough for finite differences."""
    return toy_config(dim=16, heads=2, layers=2, image_size=16, patch_size=4, max_len=12)


@pytest.fixture
def small_batch(toy_data):
    train, _ = toy_data
    batch = collate([train[i] for i in range(4)], dtype=np.float64)
    # downsample 32px renders to 16px by 2x2 averaging
    b, c, h, w = batch.images.shape
    batch.images = batch.images.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return batch


@pytest.fixture(scope="session")
def acceptance_report():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def record(criterion: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
