"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``NDTSLAM_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

BACKEND = "python"
ndt_accumulate = _fallback.ndt_accumulate
raycast_boxes = _fallback.raycast_boxes

if os.environ.get("NDTSLAM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
    else:
        BACKEND = "cython"
        ndt_accumulate = _kernels.ndt_accumulate
        raycast_boxes = _kernels.raycast_boxes

__all__ = ["BACKEND", "ndt_accumulate", "raycast_boxes"]
