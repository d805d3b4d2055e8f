"""Mask kernels with a compiled core and a numpy fallback.

The Cython extension is picked automatically when built; the environment
variable MZS_KERNELS ("compiled" | "fallback") forces one side. Both sides
are bit-identical, so everything downstream is deterministic either way.
"""

import os

from . import fallback as _fallback

try:
    from . import _core as _compiled

    HAVE_COMPILED = True
except ImportError:
    _compiled = None
    HAVE_COMPILED = False

_requested = os.environ.get("MZS_KERNELS", "").strip().lower()
if _requested == "fallback":
    _impl = _fallback
elif _requested == "compiled":
    if not HAVE_COMPILED:
        raise ImportError(
            "MZS_KERNELS=compiled but the mzs._kernels._core extension is not built"
        )
    _impl = _compiled
elif _requested:
    raise ValueError(f"unknown MZS_KERNELS value: {_requested!r}")
else:
    _impl = _compiled if HAVE_COMPILED else _fallback

BACKEND = "compiled" if _impl is _compiled else "fallback"

box_erode = _impl.box_erode
box_dilate = _impl.box_dilate
label_components_26 = _impl.label_components_26
window_counts = _impl.window_counts

__all__ = [
    "BACKEND",
    "HAVE_COMPILED",
    "box_erode",
    "box_dilate",
    "label_components_26",
    "window_counts",
]
