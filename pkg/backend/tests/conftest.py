# backend/tests/conftest.py
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from optimizations.caching_layer import SpectralCache  # noqa: E402
from shared.synthetic_data import IdentitySpec, build_body, grid_mesh, icosphere  # noqa: E402


@pytest.fixture
def grid():
    return grid_mesh(6, 6)


@pytest.fixture
def sphere():
    return icosphere(2)


@pytest.fixture
def small_sphere():
    return icosphere(1)


@pytest.fixture(scope="session")
def body():
    return build_body(IdentitySpec())


@pytest.fixture
def memory_cache():
    return SpectralCache(max_entries=8)


@pytest.fixture
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    torch.manual_seed(0)
    yield
    torch.set_default_dtype(previous)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))
