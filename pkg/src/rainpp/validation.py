"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .grid import QPE_MAX


def check_grid_array(x, n_channels: int | None = None, dtype=np.float64) -> np.ndarray:
    """Coerce ``x`` to a finite [N, C, H, W] array."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"expected a [N, C, H, W] grid array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("grid array has no samples")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid array contains NaN or Inf")
    if n_channels is not None and arr.shape[1] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {arr.shape[1]}")
    return arr


def check_qpe(qpe, like: np.ndarray | None = None) -> np.ndarray:
    """Coerce ``qpe`` to [N, H, W] within the supported rainfall domain."""
    arr = np.asarray(qpe, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a [N, H, W] QPE array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min(initial=0) < 0 or arr.max(initial=0) >= QPE_MAX:
        raise ValueError(f"QPE values must lie in [0, {QPE_MAX})")
    if like is not None and (arr.shape[0], *arr.shape[1:]) != (like.shape[0], *like.shape[2:]):
        raise ValueError(f"QPE shape {arr.shape} does not match grid shape {like.shape}")
    return arr
