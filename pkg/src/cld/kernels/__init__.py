"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly, unless the environment
variable ``CLD_DISABLE_NUMBA`` is set to a non-empty value other than "0".
Both backends stay importable so tests and the benchmark can compare them.
"""
import os

from . import _numpy as numpy_backend

_flag = os.environ.get("CLD_DISABLE_NUMBA", "")
USE_NUMBA = _flag in ("", "0")

numba_backend = None
if USE_NUMBA:
    try:
        from . import _numba as numba_backend
    except ImportError:  # pragma: no cover - numba missing
        USE_NUMBA = False

_active = numba_backend if USE_NUMBA else numpy_backend

wrap_angles = _active.wrap_angles
rollout_batch = _active.rollout_batch
raster_lookup = _active.raster_lookup
offroad_batch = _active.offroad_batch
min_distance_batch = _active.min_distance_batch
crop_batch = _active.crop_batch

BACKEND = "numba" if USE_NUMBA else "numpy"

__all__ = [
    "BACKEND",
    "crop_batch",
    "min_distance_batch",
    "numba_backend",
    "numpy_backend",
    "offroad_batch",
    "raster_lookup",
    "rollout_batch",
    "wrap_angles",
]
