"""Backend selection for the hot numeric kernels.

The compiled Cython module is used when it was built; otherwise, or when
``MDAL_PURE_PYTHON=1`` is set, the numpy/pure-Python versions are used.
Both produce bitwise-identical results.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MDAL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        pass

im2col3 = _impl.im2col3
col2im3 = _impl.col2im3
edt_sq = _impl.edt_sq
INF_SQ = _pykernels.INF_SQ


def available() -> tuple[str, ...]:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return ("python",)
    return ("python", "cython")


def use_backend(name: str) -> str:
    """Switch the active kernels at runtime; returns the previous backend name."""
    global BACKEND, im2col3, col2im3, edt_sq
    if name == "cython":
        from . import _ckernels as impl
    elif name == "python":
        impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    prev, BACKEND = BACKEND, name
    im2col3, col2im3, edt_sq = impl.im2col3, impl.col2im3, impl.edt_sq
    return prev


__all__ = ["BACKEND", "im2col3", "col2im3", "edt_sq", "INF_SQ", "available", "use_backend"]
