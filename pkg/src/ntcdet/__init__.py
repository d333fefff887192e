"""Real-time video lesion detection with temporal-context false-positive
suppression, on a small numpy autodiff core with compiled hot kernels."""

from ._kernels import BACKEND as kernel_backend

__version__ = "0.1.0"
__all__ = ["kernel_backend", "__version__"]
