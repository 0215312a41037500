import numpy as np
import pytest
import torch

from implab.data import two_spirals
from implab.model import ModelSpec, Network

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def spirals():
    return two_spirals(n_train=200, n_test=200, seed=3)


@pytest.fixture(scope="session")
def small_net():
    return Network(ModelSpec(input_shape=(2,), widths=(8, 8), n_classes=2, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria register their parts here; one line per criterion is printed at the end
CRITERIA: dict[int, list] = {}
N_CRITERIA = 10


@pytest.fixture
def criterion():
    def record(k: int, ok, detail: str = ""):
        CRITERIA.setdefault(k, []).append((bool(ok), detail))
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        parts = CRITERIA.get(k)
        if parts is None:
            terminalreporter.write_line(f"CRITERION {k}: FAIL (not evaluated)")
            continue
        status = "PASS" if all(ok for ok, _ in parts) else "FAIL"
        detail = "; ".join(d for _, d in parts if d)
        terminalreporter.write_line(f"CRITERION {k}: {status} ({detail})")
