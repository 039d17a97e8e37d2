"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numbers

import numpy as np

from .errors import ConfigError, DataError, ShapeError


def check_tensor(x, ndim=None, name="tensor"):
    """Return ``x`` as a finite float64 array, checking rank when requested."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None:
        allowed = (ndim,) if isinstance(ndim, int) else tuple(ndim)
        if arr.ndim not in allowed:
            raise ShapeError(f"{name} must have rank {allowed}, got shape {arr.shape}")
    if arr.ndim > 4:
        raise ShapeError(f"{name} rank {arr.ndim} exceeds 4")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_image(x, shape=None, name="image"):
    """Validate a C x H x W image with pixels in [0, 1]."""
    arr = check_tensor(x, ndim=3, name=name)
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ShapeError(f"{name} shape {arr.shape} does not match expected {tuple(shape)}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DataError(f"{name} pixels must lie in [0, 1]")
    return arr


def check_positive(value, name, strict=True, integer=False):
    if integer and not isinstance(value, numbers.Integral):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ConfigError(f"{name} must be a finite number, got {value!r}")
    if strict and value <= 0:
        raise ConfigError(f"{name} must be > 0, got {value!r}")
    if not strict and value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value!r}")
    return value


def check_random_state(seed):
    """Turn ``seed`` into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, numbers.Integral):
        return np.random.default_rng(int(seed))
    raise ConfigError(f"cannot build a random generator from {seed!r}")
