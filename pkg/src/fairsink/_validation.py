"""Input validation helpers shared by the public functions and estimators."""

import numpy as np
from sklearn.utils import check_array

from .errors import ConfigurationError, DataError


def as_vector(x, name="x", allow_empty=False):
    """Return ``x`` as a finite 1-D float64 array."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise DataError(f"{name} must not be empty")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def as_matrix(x, name="X"):
    try:
        return check_array(x, dtype=np.float64, ensure_2d=True)
    except ValueError as exc:
        raise DataError(f"{name}: {exc}") from exc


def as_binary(y, name="labels"):
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise DataError(f"{name} must be one-dimensional")
    if arr.size and not np.all(np.isin(arr, (0, 1))):
        raise DataError(f"{name} must contain only 0 and 1")
    return arr.astype(np.int64)


def check_same_length(**arrays):
    lengths = {k: len(v) for k, v in arrays.items()}
    if len(set(lengths.values())) > 1:
        raise DataError(f"length mismatch: {lengths}")


def check_positive(value, name):
    if not (np.isfinite(value) and value > 0):
        raise ConfigurationError(f"{name} must be positive, got {value!r}")
    return value
