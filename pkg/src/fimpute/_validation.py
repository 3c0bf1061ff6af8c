"""Input validation helpers shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .series import SeriesError


def check_series(times, values, min_obs: int = 2, allow_nan: bool = False):
    """Return float64 ``(times, values)`` after shape, order and finiteness checks."""
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.ndim != 1:
        raise SeriesError("times must be one-dimensional")
    if y.shape[0] != t.shape[0]:
        raise SeriesError(f"got {t.shape[0]} times but {y.shape[0]} values")
    if t.shape[0] < min_obs:
        raise SeriesError(f"need at least {min_obs} observations, got {t.shape[0]}")
    if not np.all(np.isfinite(t)):
        raise SeriesError("times must be finite")
    if not allow_nan and not np.all(np.isfinite(y)):
        raise SeriesError("values must be finite")
    steps = np.diff(t)
    if np.any(steps <= 0):
        row = int(np.flatnonzero(steps <= 0)[0]) + 1
        raise SeriesError(f"times must be strictly increasing (row {row})")
    return t, y


def check_query_times(t):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.ndim != 1 or not np.all(np.isfinite(t)):
        raise SeriesError("query times must be a finite one-dimensional array")
    return t


def check_is_fitted(est, attr: str):
    if getattr(est, attr, None) is None:
        from sklearn.exceptions import NotFittedError

        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")
