"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``STOPWATT_PURE=1`` is set, the pure-Python reference kernels are used.
"""

from __future__ import annotations

import os

from . import _purepy

BACKEND = "python"
_impl = _purepy

if os.environ.get("STOPWATT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _purepy

lcs_length = _impl.lcs_length
find_level_splits = _impl.find_level_splits
predict_tree = _impl.predict_tree
tree_shap = _impl.tree_shap


def backend(name: str):
    """Return the kernel module for ``"native"`` or ``"python"``."""
    if name == "python":
        return _purepy
    if name == "native":
        from . import _native

        return _native
    raise ValueError(f"unknown kernel backend {name!r}")
