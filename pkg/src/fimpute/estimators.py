"""scikit-learn style estimators wrapping the baselines and the recognition models."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator

from . import fim_gap as fg
from . import fim_local as fl
from ._validation import check_is_fitted, check_query_times, check_series
from .evaluation import spline_baseline
from .recnet import NetConfig, ParameterStore


def _net_from_store(store: ParameterStore) -> NetConfig:
    net = (store.config or {}).get("net")
    return NetConfig(**net) if net else NetConfig()


def load_local(path) -> fl.FIMLocal:
    """Build a ``FIMLocal`` from a FIMW weight file (float32, eval mode)."""
    store = ParameterStore.load(path)
    kind = (store.config or {}).get("kind", "local")
    if kind != "local":
        raise ValueError(f"{path}: expected local weights, found '{kind}'")
    model = fl.FIMLocal(_net_from_store(store)).to(torch.float32)
    store.load_into(model)
    return model.eval()


def load_gap(path) -> fg.FIMGap:
    store = ParameterStore.load(path)
    kind = (store.config or {}).get("kind", "gap")
    if kind != "gap":
        raise ValueError(f"{path}: expected gap weights, found '{kind}'")
    model = fg.FIMGap(_net_from_store(store)).to(torch.float32)
    store.load_into(model)
    return model.eval()


def _resolve_local(model, weights):
    if model is not None:
        return model
    if weights is None:
        raise ValueError("either model or weights must be given")
    return load_local(weights)


def _windowing(windows, window_obs):
    if window_obs is not None:
        return fl.ByObservations(int(window_obs))
    return fl.ByCount(int(windows))


class SplineImputer(BaseEstimator):
    """Cubic spline, optionally on Savitzky-Golay smoothed values.

    Parameters
    ----------
    savgol_window, savgol_order : int or None
        Both set enables smoothing before splining.
    bc_type : str
        Spline end condition, ``"not-a-knot"`` or ``"natural"``.
    """

    def __init__(self, savgol_window=None, savgol_order=None, bc_type="not-a-knot"):
        self.savgol_window = savgol_window
        self.savgol_order = savgol_order
        self.bc_type = bc_type

    def fit(self, times, values):
        t, y = check_series(times, values, min_obs=4)
        smoothing = None
        if self.savgol_window is not None or self.savgol_order is not None:
            if self.savgol_window is None or self.savgol_order is None:
                raise ValueError("savgol_window and savgol_order must be given together")
            smoothing = (int(self.savgol_window), int(self.savgol_order))
        self.trajectory_ = spline_baseline(t, y, smoothing, self.bc_type)
        return self

    def predict(self, times):
        check_is_fitted(self, "trajectory_")
        return self.trajectory_.x_hat(check_query_times(times))

    def predict_derivative(self, times):
        check_is_fitted(self, "trajectory_")
        return self.trajectory_.f_hat(check_query_times(times))


class FIMImputer(BaseEstimator):
    """Zero-shot imputation with a pretrained local recognition model.

    ``fit`` only runs inference on the context; no parameters change.
    """

    def __init__(self, weights=None, model=None, windows=1, window_obs=None):
        self.weights = weights
        self.model = model
        self.windows = windows
        self.window_obs = window_obs

    def fit(self, times, values):
        t, y = check_series(times, values, min_obs=2)
        self.model_ = _resolve_local(self.model, self.weights)
        self.output_ = fl.compose_windows(self.model_, t, y,
                                          _windowing(self.windows, self.window_obs))
        return self

    def predict(self, times):
        check_is_fitted(self, "output_")
        return self.output_.x_hat(check_query_times(times))

    def predict_derivative(self, times):
        """Mean and log-variance of the inferred derivative."""
        check_is_fitted(self, "output_")
        return self.output_.f_hat(check_query_times(times))

    def transform(self, times):
        t = check_query_times(times)
        f, lv = self.predict_derivative(t)
        return np.column_stack([self.predict(t), f, lv])


class FIMGapImputer(BaseEstimator):
    """Fill one contiguous missing interval using the local and gap models."""

    def __init__(self, gap, weights=None, gap_weights=None, model=None, gap_model=None):
        self.gap = gap
        self.weights = weights
        self.gap_weights = gap_weights
        self.model = model
        self.gap_model = gap_model

    def fit(self, times, values):
        t, y = check_series(times, values, min_obs=2)
        local = _resolve_local(self.model, self.weights)
        gap_model = self.gap_model
        if gap_model is None:
            if self.gap_weights is None:
                raise ValueError("either gap_model or gap_weights must be given")
            gap_model = load_gap(self.gap_weights)
        self.output_ = fg.impute_gap(local, gap_model, t, y, tuple(float(g) for g in self.gap))
        return self

    def predict(self, times):
        check_is_fitted(self, "output_")
        return self.output_.x_hat(check_query_times(times))

    def predict_derivative(self, times):
        check_is_fitted(self, "output_")
        return self.output_.f_hat(check_query_times(times))
