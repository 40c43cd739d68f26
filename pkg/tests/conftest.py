import numpy as np
import pytest

from rdnkit import _backend


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run the test body once per kernel backend."""
    prev = _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
