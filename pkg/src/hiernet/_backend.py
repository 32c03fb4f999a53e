"""Kernel selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``HIERNET_BACKEND=python`` to force the fallback.
"""

import os
from functools import lru_cache

import numpy as np

from . import _pykernels

kernels = _pykernels

if os.environ.get("HIERNET_BACKEND", "").lower() != "python":
    try:
        from . import _ckernels as kernels  # noqa: F811
    except ImportError:  # extension not built
        kernels = _pykernels


def available():
    """Names of importable backends."""
    names = ["python"]
    try:
        from . import _ckernels  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def get(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def use(name):
    """Switch the active backend for the whole package (used by tests and benchmarks)."""
    global kernels
    kernels = get(name)


@lru_cache(maxsize=256)
def _widths(widths):
    a = np.array(widths, dtype=np.int64)
    a.setflags(write=False)
    return a


def widths_array(widths):
    return _widths(tuple(widths))
