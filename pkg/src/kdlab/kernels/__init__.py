"""Backend selection for the conv2d hot kernels.

Two interchangeable implementations: a compiled Cython direct-loop kernel
and a numpy im2col one. benchmarks/bench_conv.py shows the BLAS-backed
im2col path is several times faster at the feature sizes this package
trains on, so it is the import-time default; set KDLAB_BACKEND=cython
(or =numpy) to force a backend explicitly.
"""

import os

from . import _convnp

try:
    from . import _convc
except ImportError:  # extension not built on this install
    _convc = None

_forced = os.environ.get("KDLAB_BACKEND", "").lower()
if _forced == "numpy":
    backend = _convnp
elif _forced == "cython":
    if _convc is None:
        raise ImportError("KDLAB_BACKEND=cython but the compiled extension is unavailable")
    backend = _convc
else:
    backend = _convnp

BACKEND_NAME = backend.BACKEND_NAME

conv2d_forward = backend.conv2d_forward
conv2d_grad_input = backend.conv2d_grad_input
conv2d_grad_kernel = backend.conv2d_grad_kernel

__all__ = [
    "BACKEND_NAME",
    "conv2d_forward",
    "conv2d_grad_input",
    "conv2d_grad_kernel",
    "available_backends",
]


def available_backends():
    out = {"numpy": _convnp}
    if _convc is not None:
        out["cython"] = _convc
    return out
