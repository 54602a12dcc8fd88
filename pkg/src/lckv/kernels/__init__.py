"""Kernel backend selection.

Two interchangeable implementations of the hot inner loops (attention,
rmsnorm, rotary rotation) exist: numba-jitted loops and pure numpy. The
backend is chosen once at import from the LCKV_KERNELS environment
variable ("numba", "numpy", or unset for auto-detect) and can be switched
at runtime with set_backend(), which the parity tests and the kernel
benchmark rely on.
"""

import os

from .numpy_impl import MASK_FILL, NO_SELF, WITH_SELF, visibility  # noqa: F401
from . import numpy_impl

_IMPL = None
_NAME = ""


def available_backends() -> list[str]:
    names = ["numpy"]
    try:
        import numba  # noqa: F401

        names.append("numba")
    except ImportError:
        pass
    return names


def set_backend(name: str) -> None:
    global _IMPL, _NAME
    if name == "numpy":
        _IMPL = numpy_impl
    elif name == "numba":
        from . import numba_impl

        _IMPL = numba_impl
    else:
        raise ValueError(f"unknown kernel backend {name!r} (expected 'numpy' or 'numba')")
    _NAME = name


def get_backend() -> str:
    return _NAME


def _init() -> None:
    env = os.environ.get("LCKV_KERNELS", "").strip().lower()
    if env in ("numpy", "numba"):
        set_backend(env)
        return
    if env not in ("", "auto"):
        raise ValueError(f"LCKV_KERNELS={env!r} not understood (use 'numba' or 'numpy')")
    try:
        set_backend("numba")
    except ImportError:
        set_backend("numpy")


def attention_forward(q, k, v, group, scale, n_past, kind, extra_mask=None):
    return _IMPL.attention_forward(q, k, v, group, scale, n_past, kind, extra_mask)


def attention_backward(q, k, v, d_out, group, scale, n_past, kind, extra_mask=None):
    return _IMPL.attention_backward(q, k, v, d_out, group, scale, n_past, kind, extra_mask)


def rmsnorm_forward(x, gain, eps):
    return _IMPL.rmsnorm_forward(x, gain, eps)


def rmsnorm_backward(x, gain, inv, dy):
    return _IMPL.rmsnorm_backward(x, gain, inv, dy)


def rope_apply(x, cos, sin, inverse=False):
    return _IMPL.rope_apply(x, cos, sin, inverse)


_init()
