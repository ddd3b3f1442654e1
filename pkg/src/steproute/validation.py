"""Input validation helpers used across modules.

All helpers raise :class:`~steproute.errors.InvariantViolation` naming the
offending field, so callers get uniform, testable error reporting.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import InvariantViolation


def require_unit_interval(field: str, value: float) -> float:
    if not (isinstance(value, (int, float)) and math.isfinite(value)):
        raise InvariantViolation(field, f"expected a finite number, got {value!r}")
    if not 0.0 <= value <= 1.0:
        raise InvariantViolation(field, f"{value} outside [0, 1]")
    return float(value)


def require_nonnegative(field: str, value: float) -> float:
    if not (isinstance(value, (int, float)) and math.isfinite(value)):
        raise InvariantViolation(field, f"expected a finite number, got {value!r}")
    if value < 0:
        raise InvariantViolation(field, f"{value} is negative")
    return float(value)


def require_positive_int(field: str, value: int) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise InvariantViolation(field, f"expected a positive integer, got {value!r}")
    return int(value)


def require_nonnegative_int(field: str, value: int) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 0:
        raise InvariantViolation(field, f"expected a nonnegative integer, got {value!r}")
    return int(value)


def require_prob_vector(field: str, probs: Sequence[float], atol: float = 1e-9) -> np.ndarray:
    arr = np.asarray(probs, dtype=float)
    if arr.ndim != 1:
        raise InvariantViolation(field, "expected a 1-D probability vector")
    if not np.all(np.isfinite(arr)):
        raise InvariantViolation(field, "contains non-finite entries")
    if np.any(arr < -atol):
        raise InvariantViolation(field, "contains negative mass")
    total = float(arr.sum())
    if abs(total - 1.0) > atol:
        raise InvariantViolation(field, f"sums to {total}, not 1")
    return np.clip(arr, 0.0, None)
