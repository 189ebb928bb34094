"""Rank-4 tensor conventions and checked constructors.

Every image batch in this package is a numpy array of shape
(batch, channels, height, width). There is no wrapper class; these helpers
validate arrays at public API boundaries and keep dtype policy in one place:
float32 for training, float64 for analysis and oracle work.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, GahbError


def tensor4(data, dtype=np.float32) -> np.ndarray:
    """Build a checked (b, c, h, w) array: rank 4, finite entries."""
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 4:
        raise DimensionMismatch("rank", 4, arr.ndim, "tensor4")
    if not np.all(np.isfinite(arr)):
        raise GahbError("tensor4 entries must be finite")
    return arr


def check_tensor4(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    if not isinstance(arr, np.ndarray) or arr.ndim != 4:
        got = arr.ndim if isinstance(arr, np.ndarray) else type(arr).__name__
        raise DimensionMismatch("rank", 4, got, name)
    return arr


def flatten(arr: np.ndarray) -> np.ndarray:
    """(b, c, h, w) -> (b, c*h*w), or a single image (1,c,h,w) -> (d,)."""
    check_tensor4(arr)
    if arr.shape[0] == 1:
        return arr.reshape(-1)
    return arr.reshape(arr.shape[0], -1)


def unflatten(vec: np.ndarray, shape) -> np.ndarray:
    return np.asarray(vec).reshape(shape)
