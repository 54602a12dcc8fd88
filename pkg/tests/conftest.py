import lckv  # noqa: F401  (must precede numpy: sets BLAS/OMP thread-pool env)
import numpy as np
import pytest

from lckv import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test under each available kernel backend."""
    old = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
