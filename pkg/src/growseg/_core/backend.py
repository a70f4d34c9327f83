"""Kernel backend selection.

The compiled extension is preferred when importable. ``GROWSEG_BACKEND``
overrides: ``c`` requires the extension, ``py`` forces the NumPy fallback,
``auto`` (default) picks whichever is available. Both backends return
identical results for identical inputs, so the choice only affects speed.
"""

import os

_choice = os.environ.get("GROWSEG_BACKEND", "auto")
if _choice not in ("auto", "c", "py"):
    raise RuntimeError(f"GROWSEG_BACKEND must be 'auto', 'c' or 'py', got {_choice!r}")

if _choice == "py":
    from . import _kernels_py as _impl
    BACKEND = "py"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "c"
    except ImportError:
        if _choice == "c":
            raise
        from . import _kernels_py as _impl
        BACKEND = "py"

knn_query = _impl.knn_query
radius_query = _impl.radius_query
cell27_query = _impl.cell27_query
