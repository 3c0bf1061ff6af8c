"""Metrics, classical baselines, phase-portrait extraction and the corruption benchmark."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy.interpolate import CubicSpline

from .odesim import CorruptionSpec, Trajectory, corrupt

logger = logging.getLogger(__name__)

R2_ACCURACY_THRESHOLD = 0.9


class MetricError(ValueError):
    pass


class MaskMode(str, Enum):
    MISSING_ONLY = "missing"
    GAP_ONLY = "gap"
    ALL = "all"


@dataclass
class MetricReport:
    mae: float
    mse: float
    rmse: float
    mre: float
    r2: float
    mask_mode: str = MaskMode.ALL.value


def _as_2d(a):
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def metrics(target, prediction, mask=None, mask_mode=MaskMode.ALL, with_r2: bool = True) -> MetricReport:
    """Masked MAE/MSE/RMSE/MRE and unmasked, per-dimension-averaged R^2."""
    x = _as_2d(target)
    xh = _as_2d(prediction)
    if x.shape != xh.shape:
        raise MetricError(f"shape mismatch {x.shape} vs {xh.shape}")
    m = np.ones_like(x) if mask is None else _as_2d(mask).astype(np.float64)
    if m.shape != x.shape:
        raise MetricError("mask shape mismatch")
    if not np.all((m == 0) | (m == 1)):
        raise MetricError("mask must be binary")
    n = m.sum()
    if n == 0:
        raise MetricError("empty mask")
    # masked-out predictions must not leak in, even if non-finite
    err = np.where(m > 0, x - np.where(m > 0, xh, 0.0), 0.0)
    abs_err = np.abs(err)
    mae = abs_err.sum() / n
    mse = (err**2).sum() / n
    denom = (np.abs(x) * m).sum()
    mre = abs_err.sum() / denom if denom > 0 else float("nan")
    r2 = float("nan")
    if with_r2:
        var = ((x - x.mean(axis=0)) ** 2).sum(axis=0)
        if np.any(var == 0):
            raise MetricError("zero-variance target dimension in R^2")
        r2 = float(np.mean(1.0 - ((x - xh) ** 2).sum(axis=0) / var))
    return MetricReport(float(mae), float(mse), float(np.sqrt(mse)), float(mre), r2,
                        MaskMode(mask_mode).value)


def r2_accuracy(reports) -> float:
    """Fraction of trajectories whose R^2 exceeds 0.9."""
    vals = [r.r2 for r in reports]
    return float(np.mean([v > R2_ACCURACY_THRESHOLD for v in vals])) if vals else float("nan")


def aggregate(reports) -> dict:
    """Mean and standard deviation across reports (e.g. corruption resamplings)."""
    out = {}
    for name in ("mae", "mse", "rmse", "mre", "r2"):
        v = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = (float(np.mean(v)), float(np.std(v)))
    out["r2_accuracy"] = (r2_accuracy(reports), 0.0)
    return out


# ---------------------------------------------------------------- baselines

def savgol_smooth(times, values, window: int, order: int) -> np.ndarray:
    """Local least-squares polynomial smoothing in the actual observation times.

    The window shrinks symmetrically near the ends; where it holds no more than
    ``order + 1`` points the fit interpolates and the value is left unchanged.
    """
    if window % 2 == 0 or window <= order or order < 0:
        raise ValueError(f"invalid Savitzky-Golay window {window} for order {order}")
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    n = t.shape[0]
    half = window // 2
    out = y.copy()
    for i in range(n):
        h = min(half, i, n - 1 - i)
        if 2 * h + 1 <= order + 1:
            continue
        sl = slice(i - h, i + h + 1)
        dt = t[sl] - t[i]
        scale = max(np.max(np.abs(dt)), 1e-300)
        coef = np.polynomial.polynomial.polyfit(dt / scale, y[sl], order)
        out[i] = coef[0]
    return out


SPLINE_BOUNDARIES = ("not-a-knot", "natural", "clamped", "periodic")


class SplineTrajectory:
    def __init__(self, times, values, savgol: tuple | None = None, bc_type: str = "not-a-knot"):
        t = np.asarray(times, dtype=np.float64)
        y = np.asarray(values, dtype=np.float64)
        if t.shape[0] < 4:
            raise ValueError("cubic spline needs at least 4 observations")
        if bc_type not in SPLINE_BOUNDARIES:
            raise ValueError(f"unknown spline boundary condition {bc_type!r}")
        if savgol is not None:
            y = savgol_smooth(t, y, *savgol)
        self.knots, self.knot_values = t, y
        self._cs = CubicSpline(t, y, bc_type=bc_type)

    def x_hat(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            return self.x_hat(t[None])[0]
        out = self._cs(t)
        # at the knots the interpolant is the data; skip the polynomial round-off
        pos = np.clip(np.searchsorted(self.knots, t), 0, self.knots.shape[0] - 1)
        hit = self.knots[pos] == t
        out[hit] = self.knot_values[pos[hit]]
        return out

    def f_hat(self, t):
        d = self._cs(np.asarray(t, dtype=np.float64), 1)
        return d, np.full_like(d, np.nan)


def spline_baseline(times, values, smoothing: tuple | None = None,
                    bc_type: str = "not-a-knot") -> SplineTrajectory:
    """Cubic spline through the (optionally Savitzky-Golay smoothed) observations.

    The default not-a-knot ends reproduce cubic polynomials exactly; ``"natural"``
    forces zero end curvature instead.
    """
    return SplineTrajectory(times, values, smoothing, bc_type)


# ---------------------------------------------------------------- phase portraits

def phase_portrait(model, times, values, depth: int = 1, grid_len: int = 512,
                   windowing=None, dense_len: int = 8192, second_windowing=None) -> dict:
    """Columns ``t, x, dx[, ddx]`` on a regular plotting grid.

    Depth 2 samples the inferred derivative on ``dense_len`` points and feeds
    that series back through the model (windowed, 64 windows by default).
    """
    from . import fim_local as fl

    if depth not in (1, 2):
        raise ValueError("depth must be 1 or 2")
    windowing = windowing or fl.ByCount(1)
    times = np.asarray(times, dtype=np.float64)
    comp = fl.compose_windows(model, times, values, windowing)
    grid = np.linspace(times[0], times[-1], grid_len)
    cols = {"t": grid, "x": comp.x_hat(grid), "dx": comp.f_hat(grid)[0]}
    if depth == 2:
        dense = np.linspace(times[0], times[-1], dense_len)
        dv = comp.f_hat(dense)[0]
        comp2 = fl.compose_windows(model, dense, dv, second_windowing or fl.ByCount(64))
        cols["ddx"] = comp2.f_hat(grid)[0]
    return cols


def write_columns_csv(path, cols: dict) -> None:
    from .datasets import atomic_path

    names = list(cols)
    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*(cols[n] for n in names)):
            w.writerow([repr(float(v)) for v in row])


def svg_lines(cols: dict, x: str, ys: list, width: int = 480, height: int = 320) -> str:
    """Minimal non-interactive SVG line plot of ``ys`` against ``x``."""
    xs = np.asarray(cols[x], dtype=np.float64)
    allys = np.concatenate([np.asarray(cols[y], dtype=np.float64) for y in ys])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(np.nanmin(allys)), float(np.nanmax(allys))
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1
    pad = 20
    sx = lambda v: pad + (v - x0) / (x1 - x0) * (width - 2 * pad)  # noqa: E731
    sy = lambda v: height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)  # noqa: E731
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for k, name in enumerate(ys):
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, cols[name])
                       if np.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{colors[k % 4]}" points="{pts}"><title>{name}'
                     '</title></polyline>')
    parts.append("</svg>")
    return "\n".join(parts)


# ---------------------------------------------------------------- benchmark

# ODEBench corruption grid: every combination of gamma in {0, 0.05} and rho in {0, 0.5}
DEFAULT_CORRUPTIONS = [(rho, gamma) for rho in (0.0, 0.5) for gamma in (0.0, 0.05)]


def cell_seed(base_seed: int, system: str, rho: float, gamma: float, k: int) -> int:
    key = [int(base_seed), int(k), int(round(rho * 1e6)), int(round(gamma * 1e6))]
    key += list(system.encode())
    return int(np.random.SeedSequence(key).generate_state(1)[0])


@dataclass
class BenchmarkRow:
    system: str
    rho: float
    gamma: float
    imputer: str
    mask_mode: str
    metric: str
    mean: float
    std: float
    n: int
    error: str = ""


def impute_trajectory(imputer, series, grid) -> np.ndarray:
    """Fit ``imputer`` per channel on the kept points and predict on ``grid``."""
    from sklearn.base import clone

    out = np.empty((grid.shape[0], series.n_channels))
    for d in range(series.n_channels):
        ch = series.channel(d)
        est = clone(imputer).fit(ch.times, ch.values)
        out[:, d] = est.predict(grid)
    return out


def benchmark(trajectories: dict, imputers: dict, corruptions=DEFAULT_CORRUPTIONS,
              n_seeds: int = 10, base_seed: int = 0, mask_mode=MaskMode.ALL) -> list[BenchmarkRow]:
    """Corrupt, impute and score each (system, corruption, imputer) cell.

    Metrics are averaged over ``n_seeds`` corruption resamplings; a failing
    imputer yields rows carrying the error message instead of aborting.
    """
    mask_mode = MaskMode(mask_mode)
    rows = []
    for name, traj in trajectories.items():
        for rho, gamma in corruptions:
            samples = []
            for k in range(n_seeds):
                spec = CorruptionSpec(rho, gamma, cell_seed(base_seed, name, rho, gamma, k))
                samples.append(corrupt(traj, spec))
            for iname, imputer in imputers.items():
                reports, err = [], ""
                try:
                    for c in samples:
                        pred = impute_trajectory(imputer, c.series, traj.times)
                        if mask_mode is MaskMode.MISSING_ONLY:
                            mask = np.repeat((~c.keep)[:, None], traj.states.shape[1], axis=1)
                        else:
                            mask = None
                        reports.append(metrics(traj.states, pred, mask, mask_mode))
                except Exception as exc:  # recorded as a failed cell
                    logger.warning("cell %s/%s/%s/%s failed: %s", name, rho, gamma, iname, exc)
                    err = f"{type(exc).__name__}: {exc}"
                if err:
                    rows.append(BenchmarkRow(name, rho, gamma, iname, mask_mode.value, "mae",
                                             float("nan"), float("nan"), 0, err))
                    continue
                for metric, (mean, std) in aggregate(reports).items():
                    rows.append(BenchmarkRow(name, rho, gamma, iname, mask_mode.value, metric,
                                             mean, std, len(reports)))
    return rows


def write_report(rows: list[BenchmarkRow], csv_path=None, json_path=None) -> None:
    from .datasets import atomic_path

    dicts = [asdict(r) for r in rows]
    if csv_path:
        with atomic_path(csv_path) as tmp, open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(BenchmarkRow.__dataclass_fields__))
            w.writeheader()
            for d in dicts:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in d.items()})
    if json_path:
        with atomic_path(json_path) as tmp, open(tmp, "w") as fh:
            json.dump(dicts, fh, indent=1, allow_nan=True)
