"""Local recognition model: observations -> (initial value, time-derivative function).

The network maps an instance-normalised series to a context vector ``u``; a
trunk over query times combined with ``u`` yields the mean and log-variance of
the time derivative, and two heads on ``u`` give the initial value. Long or
multichannel series are handled by windowing and channel independence.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .recnet import FFN, NetConfig, SeqEncoder, TimeEmbedding
from .series import TimeSeries
from .synthgen import L_MIN

logger = logging.getLogger(__name__)


class CompositionError(RuntimeError):
    pass


class OutOfDistributionWarning(UserWarning):
    pass


# ---------------------------------------------------------------- normalisation

@dataclass(frozen=True)
class NormalizationParams:
    y_min: float
    y_max: float
    tau_min: float
    tau_max: float
    degenerate: bool = False

    @property
    def y_range(self) -> float:
        return 1.0 if self.degenerate else self.y_max - self.y_min

    @property
    def tau_range(self) -> float:
        return self.tau_max - self.tau_min

    def times_to_norm(self, t):
        return (np.asarray(t, dtype=np.float64) - self.tau_min) / self.tau_range

    def times_from_norm(self, t):
        return np.asarray(t, dtype=np.float64) * self.tau_range + self.tau_min

    def values_from_norm(self, y):
        return np.asarray(y, dtype=np.float64) * self.y_range + self.y_min


def normalize(times, values):
    """Min-max normalise values and times to [0, 1].

    A constant series has its value range replaced by 1 and is flagged as
    degenerate; the values then all map to 0.
    """
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.shape[0] < 2:
        raise ValueError("need at least two observations")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    y_min, y_max = float(values.min()), float(values.max())
    norm = NormalizationParams(y_min, y_max, float(times[0]), float(times[-1]),
                               degenerate=not y_max > y_min)
    return norm.times_to_norm(times), (values - y_min) / norm.y_range, norm


def renormalize_f(mean, log_var, norm: NormalizationParams):
    scale = norm.y_range / norm.tau_range
    return np.asarray(mean) * scale, np.asarray(log_var) + 2.0 * math.log(scale)


def renormalize_x0(mean, log_var, norm: NormalizationParams):
    return mean * norm.y_range + norm.y_min, log_var + 2.0 * math.log(norm.y_range)


# ---------------------------------------------------------------- network

class FIMLocal(nn.Module):
    """Branch (sequence encoder + FFN), trunk (time embedding + FFN) and output heads."""

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        E, nl, w, p = cfg.embed_dim, cfg.ffn_layers, cfg.ffn_width, cfg.dropout
        self.time_embed = TimeEmbedding(E)
        self.trunk = FFN(E, E, nl, w, p)
        self.seq = SeqEncoder(1 + E, cfg.seq_hidden)
        self.branch = FFN(self.seq.out_dim, E, nl, w, p)
        self.combine = FFN(2 * E, E, nl, w, p)
        self.f_mean = nn.Linear(E, 1)
        self.f_log_var = nn.Linear(E, 1)
        self.x0_mean = FFN(E, 1, nl, w, p)
        self.x0_log_var = FFN(E, 1, nl, w, p)

    def encode(self, values: torch.Tensor, times: torch.Tensor, lengths=None) -> torch.Tensor:
        """Context vectors ``(B, E)`` from padded normalised ``(B, T)`` values and times."""
        obs = torch.cat([values.unsqueeze(-1), self.time_embed(times)], dim=-1)
        return self.branch(self.seq(obs, lengths))

    def query(self, u: torch.Tensor, t: torch.Tensor):
        """Derivative mean and log-variance ``(B, M)`` at normalised times ``(B, M)``."""
        trunk = self.trunk(self.time_embed(t))
        h = self.combine(torch.cat([trunk, u.unsqueeze(1).expand(-1, t.shape[1], -1)], dim=-1))
        return self.f_mean(h).squeeze(-1), self.f_log_var(h).squeeze(-1)

    def initial(self, u: torch.Tensor):
        return self.x0_mean(u).squeeze(-1), self.x0_log_var(u).squeeze(-1)

    def forward(self, values, times, lengths, query_times):
        u = self.encode(values, times, lengths)
        f_mean, f_lv = self.query(u, query_times)
        x0_mean, x0_lv = self.initial(u)
        return f_mean, f_lv, x0_mean, x0_lv


def _dtype(model: nn.Module):
    return next(model.parameters()).dtype


def encode_context(model: FIMLocal, times_n, values_n) -> torch.Tensor:
    """Context vector of one normalised series (inference mode)."""
    if len(times_n) < L_MIN:
        warnings.warn(f"{len(times_n)} observations is below the minimum of {L_MIN} "
                      "context points; output is out of distribution",
                      OutOfDistributionWarning, stacklevel=2)
    dt = _dtype(model)
    with torch.no_grad():
        return model.encode(torch.as_tensor(np.asarray(values_n), dtype=dt)[None],
                            torch.as_tensor(np.asarray(times_n), dtype=dt)[None])


def query(model: FIMLocal, u: torch.Tensor, t):
    """Normalised derivative ``(mean, log_var)`` at normalised times ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    with torch.no_grad():
        m, lv = model.query(u, torch.as_tensor(t, dtype=u.dtype)[None])
    return m[0].double().numpy(), lv[0].double().numpy()


def infer_initial(model: FIMLocal, u: torch.Tensor):
    with torch.no_grad():
        m, lv = model.initial(u)
    return float(m[0]), float(lv[0])


# ---------------------------------------------------------------- integration

def dense_grid_size(n_obs: int) -> int:
    return max(128, 4 * int(n_obs))


def integrate_on_grid(f_fn, x0: float, query_times, n_grid: int, t_start: float = 0.0):
    """``x0 + int_{t_start}^{t} f`` at ``query_times`` by dense trapezoid + linear interpolation.

    The dense grid spans ``t_start`` to the farthest query on each side, using at
    least ``n_grid`` points per unit of (normalised) time.
    """
    q = np.atleast_1d(np.asarray(query_times, dtype=np.float64))
    out = np.empty_like(q)
    for side in (1.0, -1.0):
        sel = (q >= t_start) if side > 0 else (q < t_start)
        if not sel.any():
            continue
        reach = max(1.0, float(np.max(np.abs(q[sel] - t_start))))
        n = int(math.ceil(n_grid * reach))
        grid = t_start + side * np.linspace(0.0, reach, n)
        fv = f_fn(grid)
        x = np.empty(n)
        x[0] = x0
        np.cumsum(0.5 * (fv[1:] + fv[:-1]) * np.diff(grid), out=x[1:])
        x[1:] += x0
        if side > 0:
            out[sel] = np.interp(q[sel], grid, x)
        else:
            out[sel] = np.interp(q[sel], grid[::-1], x[::-1])
    return out


# ---------------------------------------------------------------- outputs

@dataclass
class RecognitionOutput:
    """Inference result for one window of one channel.

    ``u`` is the context vector; ``x0_mean``/``x0_log_var`` are in normalised
    units. With ``normalized=False`` every accessor maps times from and
    values to the original scale.
    """

    model: FIMLocal
    u: torch.Tensor
    x0_mean: float
    x0_log_var: float
    norm: NormalizationParams
    n_obs: int
    normalized: bool = True
    grid_factor: int = 1

    def f_hat(self, t):
        if self.normalized:
            return query(self.model, self.u, t)
        m, lv = query(self.model, self.u, self.norm.times_to_norm(t))
        return renormalize_f(m, lv, self.norm)

    @property
    def x0(self):
        """``(mean, log_var)`` of the value at the first observation time."""
        if self.normalized:
            return self.x0_mean, self.x0_log_var
        return renormalize_x0(self.x0_mean, self.x0_log_var, self.norm)

    def x_hat(self, t):
        return reconstruct(self, t)

    @property
    def t_start(self) -> float:
        return 0.0 if self.normalized else self.norm.tau_min


def renormalize(out: RecognitionOutput) -> RecognitionOutput:
    return replace(out, normalized=False)


def reconstruct(out: RecognitionOutput, query_times) -> np.ndarray:
    """``x0 + int_0^t f`` at ``query_times`` (in the output's own time frame)."""
    q = np.atleast_1d(np.asarray(query_times, dtype=np.float64))
    qn = out.norm.times_to_norm(q) if not out.normalized else q
    n = dense_grid_size(out.n_obs) * out.grid_factor
    xn = integrate_on_grid(lambda s: query(out.model, out.u, s)[0], out.x0_mean, qn, n)
    return xn if out.normalized else out.norm.values_from_norm(xn)


def infer(model: FIMLocal, times, values, normalized_output: bool = False) -> RecognitionOutput:
    """Normalise, encode and package a single one-dimensional series."""
    was_training = model.training
    model.eval()
    try:
        tn, yn, norm = normalize(times, values)
        u = encode_context(model, tn, yn)
        x0m, x0lv = infer_initial(model, u)
    finally:
        model.train(was_training)
    out = RecognitionOutput(model, u, x0m, x0lv, norm, len(tn))
    return out if normalized_output else renormalize(out)


# ---------------------------------------------------------------- windows

@dataclass(frozen=True)
class ByCount:
    m: int


@dataclass(frozen=True)
class ByObservations:
    n: int


@dataclass
class Window:
    lo: int  # first observation index
    hi: int  # last observation index (inclusive)
    t0: float  # start of the blend interval
    t1: float  # end of the blend interval


OVERLAP_FRACTION = 0.25
OBS_OVERLAP = 2


def plan_windows(times, windowing, min_obs: int = L_MIN) -> list[Window]:
    """Split observation times into successive overlapping windows."""
    times = np.asarray(times, dtype=np.float64)
    n = times.shape[0]
    if isinstance(windowing, int):
        windowing = ByCount(windowing)
    if isinstance(windowing, ByCount):
        m = int(windowing.m)
        if m < 1:
            raise ValueError("window count must be positive")
        if m == 1:
            return [Window(0, n - 1, times[0], times[-1])]
        span = times[-1] - times[0]
        width = span / (1.0 + (1.0 - OVERLAP_FRACTION) * (m - 1))
        stride = (1.0 - OVERLAP_FRACTION) * width
        bounds = []
        for k in range(m):
            a = times[0] + k * stride
            b = times[-1] if k == m - 1 else a + width
            bounds.append((a, b))
        raw = []
        for a, b in bounds:
            idx = np.flatnonzero((times >= a) & (times <= b))
            raw.append([a, b, idx])
    elif isinstance(windowing, ByObservations):
        size = int(windowing.n)
        if size <= OBS_OVERLAP:
            raise ValueError(f"observations per window must exceed {OBS_OVERLAP}")
        raw, start = [], 0
        while True:
            end = min(start + size - 1, n - 1)
            idx = np.arange(start, end + 1)
            raw.append([times[start], times[end], idx])
            if end == n - 1:
                break
            start = end - OBS_OVERLAP + 1
    else:
        raise TypeError(f"unknown windowing {windowing!r}")

    # windows short of min_obs are merged into their right neighbour (last one leftwards)
    merged = True
    while merged and len(raw) > 1:
        merged = False
        for k, (a, b, idx) in enumerate(raw):
            if idx.shape[0] >= min_obs:
                continue
            j = k + 1 if k + 1 < len(raw) else k - 1
            lo, hi = min(k, j), max(k, j)
            na, nb = raw[lo][0], raw[hi][1]
            nidx = np.union1d(raw[lo][2], raw[hi][2])
            raw[lo:hi + 1] = [[na, nb, nidx]]
            merged = True
            break
    windows = []
    for a, b, idx in raw:
        if idx.shape[0] == 0:
            raise CompositionError("window without observations")
        windows.append(Window(int(idx[0]), int(idx[-1]), float(a), float(b)))
    return windows


@dataclass
class ComposedOutput:
    """Blend of per-window outputs; convex on each overlap, exact elsewhere."""

    windows: list[Window]
    parts: list[RecognitionOutput]

    def _weights(self, t):
        """Per-window blend weights ``(K, M)`` and their time derivatives."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        K = len(self.windows)
        w = np.zeros((K, t.shape[0]))
        dw = np.zeros_like(w)
        if K == 1:
            w[0] = 1.0
            return w, dw
        # region owner: the last window whose blend interval starts at or before t
        starts = np.array([win.t0 for win in self.windows])
        owner = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, K - 1)
        w[owner, np.arange(t.shape[0])] = 1.0
        for k in range(1, K):
            A, B = self.windows[k - 1], self.windows[k]
            lo, hi = B.t0, A.t1
            if hi <= lo:
                continue
            sel = (t >= lo) & (t <= hi)
            wa = (hi - t[sel]) / (hi - lo)
            w[:, sel] = 0.0
            w[k - 1, sel] = wa
            w[k, sel] = 1.0 - wa
            dw[k - 1, sel] = -1.0 / (hi - lo)
            dw[k, sel] = 1.0 / (hi - lo)
        return w, dw

    def x_hat(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if len(self.parts) == 1:
            return self.parts[0].x_hat(t)
        w, _ = self._weights(t)
        x = np.zeros(t.shape[0])
        for k, part in enumerate(self.parts):
            sel = w[k] != 0
            if sel.any():
                x[sel] += w[k, sel] * part.x_hat(t[sel])
        return x

    def f_hat(self, t):
        """Derivative of the blended trajectory with a blended variance."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        if len(self.parts) == 1:
            return self.parts[0].f_hat(t)
        w, dw = self._weights(t)
        f = np.zeros(t.shape[0])
        var = np.zeros(t.shape[0])
        for k, part in enumerate(self.parts):
            sel = (w[k] != 0) | (dw[k] != 0)
            if not sel.any():
                continue
            m, lv = part.f_hat(t[sel])
            f[sel] += w[k, sel] * m
            var[sel] += w[k, sel] ** 2 * np.exp(lv)
            if np.any(dw[k, sel] != 0):
                f[sel] += dw[k, sel] * part.x_hat(t[sel])
        with np.errstate(divide="ignore"):
            return f, np.log(var)

    @property
    def x0(self):
        return self.parts[0].x0

    @property
    def span(self):
        return self.windows[0].t0, self.windows[-1].t1


def compose_windows(model: FIMLocal, times, values, windowing=ByCount(1)) -> ComposedOutput:
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    windows = plan_windows(times, windowing)
    parts = []
    for k, win in enumerate(windows):
        sl = slice(win.lo, win.hi + 1)
        out = infer(model, times[sl], values[sl])
        check = np.concatenate([[out.x0[0]], out.f_hat([win.t0, win.t1])[0]])
        if not np.all(np.isfinite(check)):
            raise CompositionError(f"window {k} produced non-finite output")
        parts.append(out)
    return ComposedOutput(windows, parts)


@dataclass
class ChannelResult:
    output: ComposedOutput | None = None
    error: str | None = None


def compose_channels(model: FIMLocal, series: TimeSeries, windowing=ByCount(1)) -> dict[int, ChannelResult]:
    """Each channel processed on its own; failures are reported per channel."""
    results = {}
    for d in range(series.n_channels):
        try:
            ch = series.channel(d)
            results[d] = ChannelResult(compose_windows(model, ch.times, ch.values, windowing))
        except (ValueError, CompositionError) as exc:
            logger.warning("channel %d failed: %s", d, exc)
            results[d] = ChannelResult(error=str(exc))
    return results
