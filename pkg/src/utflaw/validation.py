"""Input validation helpers for the estimator-style APIs."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


def check_bundle_array(X, input_shape=None, allow_empty=False):
    """Validate a bundle batch.

    Accepts raw uint8 counts (scaled lazily by :func:`as_float_batch`) or
    floats in [0, 1]. Returns the array unchanged in dtype.
    """
    X = np.asarray(X)
    if X.ndim != 4:
        raise ShapeError(f"expected a 4-D batch (n, time, rotary, channel), got shape {X.shape}")
    if input_shape is not None and X.shape[1:] != tuple(input_shape):
        raise ShapeError(f"bundle shape {X.shape[1:]} != model input {tuple(input_shape)}")
    if X.shape[0] == 0 and not allow_empty:
        raise ConfigError("empty bundle batch")
    if X.dtype == np.uint8:
        return X
    if not np.issubdtype(X.dtype, np.floating):
        raise ShapeError(f"bundle values must be uint8 counts or floats, got {X.dtype}")
    if X.size:
        if not np.all(np.isfinite(X)):
            raise ValueError("bundle values must be finite")
        if X.min() < 0 or X.max() > 1:
            raise ValueError("float bundle values must lie in [0, 1]")
    return X


def as_float_batch(X, dtype=np.float64):
    X = np.asarray(X)
    dt = np.dtype(dtype)
    if X.dtype == np.uint8:
        return X.astype(dt) / dt.type(255.0)
    return X.astype(dt, copy=False)


def check_binary_labels(y, n=None):
    y = np.asarray(y)
    if y.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {y.shape}")
    if n is not None and y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} samples")
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y.astype(np.int64)

