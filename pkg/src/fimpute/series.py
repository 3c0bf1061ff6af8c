"""Core time-series container shared by every module."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SeriesError(ValueError):
    """Raised for malformed time series input."""


@dataclass
class TimeSeries:
    """Observation values ``(n,)`` or ``(n, D)`` on strictly increasing times.

    ``mask`` marks available entries (1) and missing ones (0); it has the same
    shape as ``values``. Missing entries may hold any value, NaN included.
    """

    times: np.ndarray
    values: np.ndarray
    mask: np.ndarray | None = None
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.ndim != 1:
            raise SeriesError("times must be one-dimensional")
        if self.values.shape[0] != self.times.shape[0]:
            raise SeriesError(
                f"values has {self.values.shape[0]} rows but times has {self.times.shape[0]}"
            )
        if self.times.size > 1:
            steps = np.diff(self.times)
            if np.any(steps == 0):
                row = int(np.flatnonzero(steps == 0)[0]) + 1
                raise SeriesError(f"duplicate timestamp at row {row}")
            if np.any(steps < 0):
                row = int(np.flatnonzero(steps < 0)[0]) + 1
                raise SeriesError(f"times not strictly increasing at row {row}")
        if self.mask is None:
            self.mask = np.isfinite(self.values).astype(np.int8)
        else:
            self.mask = np.asarray(self.mask, dtype=np.int8)
            if self.mask.shape != self.values.shape:
                raise SeriesError("mask shape must match values shape")

    @property
    def n_channels(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def channel(self, d: int) -> "TimeSeries":
        """Observed part of channel ``d`` as a one-dimensional series."""
        if self.values.ndim == 1:
            if d != 0:
                raise IndexError(d)
            vals, m = self.values, self.mask
        else:
            vals, m = self.values[:, d], self.mask[:, d]
        keep = m.astype(bool)
        return TimeSeries(self.times[keep], vals[keep])

    def __len__(self):
        return self.times.shape[0]
