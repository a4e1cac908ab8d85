"""Kernel backend selection.

Prefers the compiled extension; falls back to the numpy implementation when
the extension is missing or when ELICIT_PURE_PYTHON=1 is set. Both backends
expose identical signatures and the same operation order.
"""

from __future__ import annotations

import os

if os.environ.get("ELICIT_PURE_PYTHON") == "1":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl

BACKEND: str = _impl.BACKEND
ss_site_update = _impl.ss_site_update
ss_dir_site_update = _impl.ss_dir_site_update
sign_tilted_moments = _impl.sign_tilted_moments
