"""Hot kernel dispatch.

The active backend is picked once at import from the STITCHKIT_BACKEND
environment variable: "numba" (default when numba imports), "numpy", or
"auto". set_backend() switches at runtime, mainly for tests and the
benchmark script.
"""

import os

from . import numpy_ops

_KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "upsample2x_forward",
    "upsample2x_backward",
)

_numba_ops = None
_backend_name = "numpy"
_impl = numpy_ops


def _load_numba():
    global _numba_ops
    if _numba_ops is None:
        from . import numba_ops

        _numba_ops = numba_ops
    return _numba_ops


def set_backend(name):
    """Select 'numba', 'numpy' or 'auto'. Returns the resolved name."""
    global _backend_name, _impl
    if name == "auto":
        try:
            _load_numba()
            name = "numba"
        except ImportError:
            name = "numpy"
    if name == "numba":
        _impl = _load_numba()
    elif name == "numpy":
        _impl = numpy_ops
    else:
        raise ValueError(f"unknown backend {name!r}")
    _backend_name = name
    return name


def active_backend():
    return _backend_name


def get(name):
    """Fetch a kernel by name from the active backend."""
    if name not in _KERNEL_NAMES:
        raise KeyError(name)
    return getattr(_impl, name)


set_backend(os.environ.get("STITCHKIT_BACKEND", "auto"))
