"""Kernel backend selection.

The compiled extension is preferred; set ``ATTNFORGE_PURE_PYTHON=1`` to force
the numpy fallback. Both backends are importable side by side so tests and
benchmarks can compare them.
"""
import os

from . import _kernels_py as python_kernels

try:
    from . import _ckernels as compiled_kernels
except ImportError:  # extension not built
    compiled_kernels = None

if compiled_kernels is not None and os.environ.get("ATTNFORGE_PURE_PYTHON", "") not in ("1", "true"):
    kernels = compiled_kernels
    BACKEND = "compiled"
else:
    kernels = python_kernels
    BACKEND = "python"


def available_backends():
    out = {"python": python_kernels}
    if compiled_kernels is not None:
        out["compiled"] = compiled_kernels
    return out
