"""Zero-shot imputation of ODE-generated time series with recognition models."""
from .estimators import FIMGapImputer, FIMImputer, SplineImputer, load_gap, load_local
from .series import SeriesError, TimeSeries

__all__ = ["FIMGapImputer", "FIMImputer", "SplineImputer", "SeriesError", "TimeSeries",
           "load_gap", "load_local"]
__version__ = "0.1.0"
