"""Backend dispatch for the hot numeric kernels.

The numba backend is the default when numba imports cleanly; set
``DCONN_BACKEND=numpy`` to force the pure-numpy fallback (or
``DCONN_BACKEND=numba`` to insist on numba and fail loudly if it is
missing). The choice is made once at import time. ``benchmarks/``
compares the two.
"""

from __future__ import annotations

import os

from . import _kernels_numpy

_requested = os.environ.get("DCONN_BACKEND", "").strip().lower()

if _requested == "":
    try:
        import numba  # noqa: F401

        _requested = "numba"
    except ImportError:
        _requested = "numpy"

if _requested == "numba":
    from . import _kernels_numba as _impl
elif _requested == "numpy":
    _impl = _kernels_numpy
else:
    raise ValueError(f"DCONN_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_BACKEND = _requested


def backend_name() -> str:
    return _BACKEND


def get_impl(name: str):
    """Fetch a specific backend module (used by tests and benchmarks)."""
    if name == "numpy":
        return _kernels_numpy
    if name == "numba":
        from . import _kernels_numba

        return _kernels_numba
    raise ValueError(f"unknown backend {name!r}")


conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel
upsample_forward = _impl.upsample_forward
upsample_backward = _impl.upsample_backward
