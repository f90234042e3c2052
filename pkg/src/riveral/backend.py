"""Kernel backend selection.

The compiled core is used when it imports; ``RIVERAL_BACKEND=python`` forces
the numpy fallback.
"""
from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["cython"] = _compiled


def _pick():
    want = os.environ.get("RIVERAL_BACKEND", "").strip().lower()
    if want:
        if want not in BACKENDS:
            raise ImportError(f"RIVERAL_BACKEND={want!r} is not available; have {sorted(BACKENDS)}")
        return BACKENDS[want]
    return _compiled if _compiled is not None else _kernels_py


kernels = _pick()


def get(name: str | None = None):
    if name is None:
        return kernels
    return BACKENDS[name]
