"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numpy as np

__all__ = ["check_images", "check_labels"]


def check_images(X, input_shape=None) -> np.ndarray:
    """Validate an N x C x H x W float image array in [0, 1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (N, C, H, W), got {X.shape}")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ValueError(f"images of shape {X.shape[1:]} do not match expected {tuple(input_shape)}")
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_labels(y, n_samples: int, num_classes: int | None = None) -> np.ndarray:
    """Validate an integer label vector aligned with `n_samples`."""
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"expected {n_samples} labels, got shape {y.shape}")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be non-negative")
    if num_classes is not None and y.size and y.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y
