"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Set ``MARKETRL_PURE_PYTHON=1`` to force the fallback.
"""

import os

from marketrl import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MARKETRL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from marketrl import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

auction = _impl.auction
cap_bids = _impl.cap_bids
maxplus_merge = _impl.maxplus_merge


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from marketrl import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
