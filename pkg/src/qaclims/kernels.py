"""Backend selection for the per-pixel kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``QACLIMS_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("QACLIMS_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

fat_regions = _impl.fat_regions
confusion_update = _impl.confusion_update
cam_argmax = _impl.cam_argmax
bilinear_upsample = _impl.bilinear_upsample

__all__ = [
    "BACKEND",
    "fat_regions",
    "confusion_update",
    "cam_argmax",
    "bilinear_upsample",
]
