"""Backend selection for the windowed kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is loaded. ``PNEUMOSEG_KERNELS=numpy`` forces the fallback.
"""
import importlib
import os

from . import _npkernels


def load(name=None):
    """Return a kernel module by name ("cython" or "numpy")."""
    name = name or os.environ.get("PNEUMOSEG_KERNELS", "auto")
    if name == "numpy":
        return _npkernels
    try:
        return importlib.import_module("pneumoseg.tensor._ckernels")
    except ImportError:
        if name == "cython":
            raise
        return _npkernels


backend = load()
BACKEND = backend.NAME


def use(name):
    """Switch the active backend in-process (benchmarks and tests)."""
    global backend, BACKEND
    backend = load(name)
    BACKEND = backend.NAME
    return backend
