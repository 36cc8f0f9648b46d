"""Input validation helpers for array-facing entry points."""

import numpy as np

from .exceptions import LabelOutOfRange, ShapeMismatch

__all__ = ["as_image_batch", "as_label_vector", "check_matching_lengths"]


def as_image_batch(x, input_shape=None):
    """Coerce to a float64 (N, C, H, W) batch.

    A 3-D array is treated as single-channel (N, H, W).  When
    ``input_shape`` is given the per-sample shape must match it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4:
        raise ShapeMismatch(f"expected (N, C, H, W) images, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("images contain non-finite values")
    if input_shape is not None and x.shape[1:] != tuple(input_shape):
        raise ShapeMismatch(f"sample shape {x.shape[1:]} != expected {tuple(input_shape)}")
    return x


def as_label_vector(y, class_count=None):
    """Coerce to an int64 label vector, optionally range-checked."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeMismatch(f"expected a 1-D label vector, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        rounded = np.rint(np.asarray(y, dtype=np.float64))
        if not np.array_equal(rounded, np.asarray(y, dtype=np.float64)):
            raise LabelOutOfRange("labels must be integers")
        y = rounded
    y = y.astype(np.int64)
    if class_count is not None and y.size and (y.min() < 0 or y.max() >= class_count):
        raise LabelOutOfRange(f"labels must lie in [0, {class_count})")
    return y


def check_matching_lengths(x, y):
    if x.shape[0] != y.shape[0]:
        raise ShapeMismatch(f"{x.shape[0]} samples but {y.shape[0]} labels")
