import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

import linalg_kernel  # noqa: E402
import problems  # noqa: E402
from hodlr import TruncationPolicy  # noqa: E402


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(20240611))


@pytest.fixture
def policy():
    return TruncationPolicy(rel_tol=1e-12, leaf_size=8)


@pytest.fixture
def tridiagonal_100():
    return problems.laplacian_1d(100)


@pytest.fixture
def poisson_small():
    return problems.poisson(10)


@pytest.fixture
def qbd_small():
    return problems.random_qbd(16, seed=problems.DEFAULT_SEED)


@pytest.fixture(autouse=True)
def default_numeric_settings():
    yield
    linalg_kernel.configure(**linalg_kernel.NumericSettings().model_dump())
