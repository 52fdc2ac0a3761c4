"""Select the compiled kernels when present, else the pure-numpy fallback.

Set ``NRSFM_PURE_PYTHON=1`` to force the fallback even when the extension
was built. ``backend_name()`` reports which twin is active.
"""

from __future__ import annotations

import os

import numpy as np

from nrsfm import _kernels_py

if os.environ.get("NRSFM_PURE_PYTHON", "").strip() not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from nrsfm import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

weiszfeld_frames = _impl.weiszfeld_frames
solve_x_frames = _impl.solve_x_frames


def backend_name() -> str:
    return _impl.BACKEND_NAME


def so3_exp(v: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) -> rotations (..., 3, 3), any leading shape."""
    v = np.asarray(v, dtype=np.float64)
    lead = v.shape[:-1]
    return np.asarray(_impl.so3_exp(v.reshape(-1, 3))).reshape(lead + (3, 3))


def so3_log(R: np.ndarray) -> np.ndarray:
    """Rotations (..., 3, 3) -> axis-angle vectors (..., 3), any leading shape."""
    R = np.asarray(R, dtype=np.float64)
    lead = R.shape[:-2]
    return np.asarray(_impl.so3_log(R.reshape(-1, 3, 3))).reshape(lead + (3,))


def geodesic_angles(Ra: np.ndarray, Rb: np.ndarray) -> np.ndarray:
    """Elementwise geodesic distance between broadcast rotation batches."""
    Ra, Rb = np.broadcast_arrays(np.asarray(Ra, dtype=np.float64),
                                 np.asarray(Rb, dtype=np.float64))
    lead = Ra.shape[:-2]
    out = _impl.geodesic_angles(Ra.reshape(-1, 3, 3), Rb.reshape(-1, 3, 3))
    return np.asarray(out).reshape(lead)
