"""Select the compiled kernels when available, else the numpy fallback.

Set ``KDAUG_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
kernels = _kernels_py

if not os.environ.get("KDAUG_PURE_PYTHON"):
    try:
        from . import _kernels as kernels  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        pass

removal_fill = kernels.removal_fill
roll_time = kernels.roll_time
calibration_bins = kernels.calibration_bins
