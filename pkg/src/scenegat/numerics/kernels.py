"""Segment kernel backend, chosen once at import.

The compiled extension is used when it was built; otherwise the numpy
fallback. Set ``SCENEGAT_PURE_PYTHON=1`` to force the fallback. The
compiled path handles float64 only; other float dtypes (the extended
precision used by gradient checks) always take the numpy route.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
segment_sum = _fallback.segment_sum
segment_max = _fallback.segment_max

if os.environ.get("SCENEGAT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"

        def segment_sum(values, segments, num_segments):
            if getattr(values, "dtype", None) not in (np.float64, None):
                return _fallback.segment_sum(values, segments, num_segments)
            return _ckernels.segment_sum(values, segments, num_segments)

        def segment_max(values, segments, num_segments):
            if getattr(values, "dtype", None) not in (np.float64, None):
                return _fallback.segment_max(values, segments, num_segments)
            return _ckernels.segment_max(values, segments, num_segments)

__all__ = ["BACKEND", "segment_sum", "segment_max"]
