"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_consistent_length


def check_images(X, divisible_by: int = 1, name: str = "X") -> np.ndarray:
    """Validate an ``(n, 3, h, w)`` batch of images in [0, 1]; returns float32."""
    X = np.asarray(X.data if hasattr(X, "data") and not isinstance(X, np.ndarray) else X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3, h, w); got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    if X.min() < 0 or X.max() > 1:
        raise ValueError(f"{name} values must lie in [0, 1]")
    h, w = X.shape[2:]
    if h % divisible_by or w % divisible_by:
        raise ValueError(f"{name} spatial size {h}x{w} must be divisible by {divisible_by}")
    return X


def check_pairs(X, divisible_by: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Split an ``(n, 2, 3, h, w)`` array, or a ``(ref, dist)`` tuple, into two batches."""
    if isinstance(X, (tuple, list)) and len(X) == 2:
        ref, dist = X
    else:
        X = np.asarray(X)
        if X.ndim != 5 or X.shape[1] != 2:
            raise ValueError(f"pairs must have shape (n, 2, 3, h, w); got {X.shape}")
        ref, dist = X[:, 0], X[:, 1]
    ref = check_images(ref, divisible_by, "reference images")
    dist = check_images(dist, divisible_by, "distorted images")
    if ref.shape != dist.shape:
        raise ValueError(f"reference {ref.shape} and distorted {dist.shape} shapes differ")
    return ref, dist


def check_scores(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    check_consistent_length(np.empty(n), y)
    if not np.all(np.isfinite(y)):
        raise ValueError("scores contain NaN or infinity")
    return y
