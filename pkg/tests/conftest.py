import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from chainfl.config import config_from_mapping  # noqa: E402
from chainfl.fl_core import Dataset, MlpArchitecture  # noqa: E402
from chainfl.ledger import AuthorizationList, KeyPair  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def small_config(**sections):
    """A fast config: few clients, short runs, low PoW difficulty."""
    doc = {
        "experiment": {"total_clients": 8, "max_rounds": 6, "seed": 3},
        "model": {"layer_sizes": [8, 12, 4]},
        "training": {"learning_rate": 0.05},
        "data": {"client_size_min": 20, "client_size_max": 40},
        "ledger": {"difficulty": 4},
    }
    for name, values in sections.items():
        doc.setdefault(name, {}).update(values)
    return config_from_mapping(doc)


@pytest.fixture
def keys():
    rng = np.random.default_rng(99)
    return [KeyPair.from_seed(rng.bytes(32)) for _ in range(4)]


@pytest.fixture
def auth(keys):
    return AuthorizationList.from_keys(keys)


@pytest.fixture
def arch():
    return MlpArchitecture((4, 6, 3))


@pytest.fixture
def blob_data():
    rng = np.random.default_rng(7)
    centers = np.array([[3.0, 0, 0, 0], [0, 3.0, 0, 0], [0, 0, 3.0, 0]])
    y = rng.integers(0, 3, 300)
    x = centers[y] + rng.normal(size=(300, 4))
    return Dataset(x, y)
