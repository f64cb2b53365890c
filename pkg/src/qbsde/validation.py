"""Small input-validation helpers used at public entry points.

These follow the check_* idiom: validate, normalise, and return the value,
raising ConfigurationError with the offending name in the message.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, EvaluationFault


def check_positive(name: str, value: float, allow_zero: bool = False) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise ConfigurationError(f"{name} must be finite, got {value!r}")
    if allow_zero:
        if value < 0:
            raise ConfigurationError(f"{name} must be >= 0, got {value!r}")
    elif value <= 0:
        raise ConfigurationError(f"{name} must be > 0, got {value!r}")
    return value


def check_int(name: str, value: int, minimum: int = 0) -> int:
    if int(value) != value:
        raise ConfigurationError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ConfigurationError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_in_unit_interval(name: str, value: float) -> float:
    value = float(value)
    if not (0.0 <= value <= 1.0):
        raise ConfigurationError(f"{name} must lie in [0, 1], got {value!r}")
    return value


def check_vector(name: str, value, dim: int | None = None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.ndim != 1:
        raise ConfigurationError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ConfigurationError(f"{name} must have length {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} must be finite, got {arr!r}")
    return arr


def check_finite_values(name: str, arr: np.ndarray, at=None) -> np.ndarray:
    """Raise EvaluationFault naming the first bad point if arr has NaN or inf."""
    arr = np.asarray(arr)
    bad = ~np.isfinite(arr)
    if np.any(bad):
        idx = tuple(int(i[0]) for i in np.nonzero(bad))
        where = f" at index {idx}" if arr.ndim else ""
        point = "" if at is None else f" (input {at})"
        raise EvaluationFault(f"{name} returned a non-finite value{where}{point}")
    return arr
