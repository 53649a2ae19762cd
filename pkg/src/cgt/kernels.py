"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the pure-Python
implementations take over.  Set ``CGT_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("CGT_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

BACKEND: str = _impl.BACKEND
sample_trees = _impl.sample_trees
count_duplicates = _impl.count_duplicates
tree_size = _kernels_py.tree_size


def available_backends() -> dict[str, object]:
    backends: dict[str, object] = {"python": _kernels_py}
    try:
        from . import _kernels

        backends["cython"] = _kernels
    except ImportError:
        pass
    return backends
