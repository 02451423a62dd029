import os

# Keep BLAS single-threaded: timing-sensitive tests (complexity slopes) must see
# arithmetic cost, not thread-pool scheduling; set before numpy loads.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    from mvil import _kernels

    _kernels.warmup()
