"""Kernel backend selection.

Imports the compiled extension when present, otherwise falls back to the
numpy implementation. Set ``TTASTREAM_PURE=1`` to force the fallback (used
by the backend-parity tests and the benchmark).
"""

from __future__ import annotations

import os

if os.environ.get("TTASTREAM_PURE"):
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as _impl  # type: ignore[no-redef]

BACKEND: str = _impl.BACKEND
GAUSSIAN: int = _impl.GAUSSIAN
LINEAR: int = _impl.LINEAR
iou_matrix = _impl.iou_matrix
soft_nms_kernel = _impl.soft_nms_kernel
