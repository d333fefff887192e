"""Hot numeric kernels.

Bilinear grid sampling and block-match SAD come in two flavours: a compiled
Cython core and a pure-numpy fallback, picked once at import time (set
NTCDET_KERNELS=python to force the fallback, =cython to require the
extension). Convolution is im2col + BLAS in either case; dense GEMM is the
one loop numpy already does best.
"""

import os
from types import SimpleNamespace

from . import conv_blas
from . import fallback as _fallback

_choice = os.environ.get("NTCDET_KERNELS", "auto").strip().lower()

if _choice in ("auto", "", "cython", "c"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        if _choice in ("cython", "c"):
            raise ImportError(
                "NTCDET_KERNELS=cython but the compiled extension is not built; "
                "reinstall with `pip install -e . --no-build-isolation`"
            ) from None
        _impl = _fallback
        BACKEND = "python"
elif _choice in ("python", "py", "numpy"):
    _impl = _fallback
    BACKEND = "python"
else:
    raise RuntimeError(f"unknown NTCDET_KERNELS value {_choice!r}")

conv2d_forward = conv_blas.conv2d_forward
conv2d_backward_input = conv_blas.conv2d_backward_input
conv2d_backward_weight = conv_blas.conv2d_backward_weight
grid_sample_forward = _impl.grid_sample_forward
grid_sample_backward = _impl.grid_sample_backward
block_match = _impl.block_match


def available_backends():
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def get_backend(name):
    """Full kernel namespace for an explicit backend (used by benchmarks/tests)."""
    if name == "python":
        impl = _fallback
    elif name == "cython":
        from . import _ckernels as impl
    else:
        raise ValueError(f"unknown backend {name!r}")
    return SimpleNamespace(
        conv2d_forward=conv_blas.conv2d_forward,
        conv2d_backward_input=conv_blas.conv2d_backward_input,
        conv2d_backward_weight=conv_blas.conv2d_backward_weight,
        grid_sample_forward=impl.grid_sample_forward,
        grid_sample_backward=impl.grid_sample_backward,
        block_match=impl.block_match,
    )
