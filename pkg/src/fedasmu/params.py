"""Dense parameter-vector arithmetic shared by every other module.

A parameter vector is a 1-D contiguous float64 numpy array. Model weights,
uploads, global snapshots and merge results all live in this representation;
the aggregation math never needs layer structure.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError


def as_params(values) -> np.ndarray:
    """Coerce to a 1-D float64 vector, rejecting non-finite entries."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise UsageError(f"parameter vector must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise UsageError("parameter vector contains NaN/Inf")
    return arr


def _check_dims(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise UsageError(f"dimension mismatch: {x.shape} vs {y.shape}")


def dot(x: np.ndarray, y: np.ndarray) -> float:
    """Inner product of two parameter vectors."""
    _check_dims(x, y)
    return float(np.dot(x, y))


def mix(a: float, w_keep: np.ndarray, w_in: np.ndarray) -> np.ndarray:
    """Convex combination (1-a)*w_keep + a*w_in.

    This is the single mixing kernel behind both the server aggregation and
    the device-side fresh-model merge.
    """
    if not 0.0 <= a <= 1.0:
        raise UsageError(f"mixing weight must be in [0, 1], got {a}")
    _check_dims(w_keep, w_in)
    return (1.0 - a) * w_keep + a * w_in


def l2_norm(x: np.ndarray) -> float:
    """Euclidean norm."""
    return float(np.linalg.norm(x))
