"""Layer-condensed KV cache transformer decoder on CPU.

Thread-pool tuning must happen before numpy first loads OpenBLAS: with the
default spin timeout, BLAS worker threads busy-wait long after each GEMM
and starve the numba kernels that run between them (and vice versa for the
OpenMP workers). Importing this package first in the process applies the
fix; if numpy is already initialized the settings are inert but harmless.
"""

import os as _os

_os.environ.setdefault("OPENBLAS_THREAD_TIMEOUT", "5")
_os.environ.setdefault("OMP_WAIT_POLICY", "PASSIVE")

from .model import (  # noqa: E402
    ModelConfig,
    ModelWeights,
    init_weights,
    parallel_forward,
    sequential_forward,
)
from .training import TrainConfig, evaluate, train_model  # noqa: E402

__all__ = [
    "ModelConfig",
    "ModelWeights",
    "TrainConfig",
    "evaluate",
    "init_weights",
    "parallel_forward",
    "sequential_forward",
    "train_model",
    "__version__",
]

__version__ = "0.1.0"
