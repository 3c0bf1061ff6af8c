"""Temporal-gap imputation on top of a frozen local model.

The observed part of a series is split into four sets around the gap. Each set
is locally normalised and encoded by the frozen local branch network; its
scale statistics are embedded and added. A small attention stack reads the
sequence with a learnable token in the gap slot and emits a context vector for
the gap, which the frozen local heads decode into the time derivative there.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import fim_local as fl
from .recnet import AttnEncoder, NetConfig
from .synthgen import L_MIN_SET, N_OBSERVED_SETS, equal_split_sizes

K_SETS = N_OBSERVED_SETS + 1
N_STATS = 9
TAU_DIFF_FLOOR = 1e-6


class GapError(ValueError):
    pass


@dataclass(frozen=True)
class SetSplit:
    sets: list  # K (start, stop) half-open index ranges; the gap set is empty
    q: int  # 1-based position of the gap set
    gap: tuple  # (t_first, t_last) of the gap

    @property
    def K(self) -> int:
        return len(self.sets)

    def observed(self):
        """(position, start, stop) of the observed sets, in order."""
        return [(j + 1, a, b) for j, (a, b) in enumerate(self.sets) if j + 1 != self.q]


def split_sets(times, gap, min_per_set: int = L_MIN_SET) -> SetSplit:
    """Four contiguous equal-count observed sets with the gap inserted at its position.

    Observations falling inside the gap are ignored. The number of sets left of
    the gap is proportional to the share of observations there (at least one on
    each side); each side is then split evenly, remainder spread left to right.
    """
    times = np.asarray(times, dtype=np.float64)
    t_lo, t_hi = float(gap[0]), float(gap[1])
    if not t_hi > t_lo:
        raise GapError("gap must have positive length")
    if t_lo <= times[0] or t_hi >= times[-1]:
        raise GapError("gap must lie strictly inside the series time span")
    n_left = int(np.searchsorted(times, t_lo, side="left"))
    right_start = int(np.searchsorted(times, t_hi, side="right"))
    n_right = times.shape[0] - right_start
    n = n_left + n_right
    if n_left < min_per_set or n_right < min_per_set:
        raise GapError("too few observations on one side of the gap")
    k_left = int(np.clip(round(N_OBSERVED_SETS * n_left / n), 1, N_OBSERVED_SETS - 1))
    while k_left > 1 and n_left < k_left * min_per_set:
        k_left -= 1
    while k_left < N_OBSERVED_SETS - 1 and n_right < (N_OBSERVED_SETS - k_left) * min_per_set:
        k_left += 1
    k_right = N_OBSERVED_SETS - k_left
    if n_left < k_left * min_per_set or n_right < k_right * min_per_set:
        raise GapError(f"need at least {min_per_set} observations per set")
    sets, pos = [], 0
    for size in equal_split_sizes(n_left, k_left):
        sets.append((pos, pos + size))
        pos += size
    sets.append((n_left, n_left))
    pos = right_start
    for size in equal_split_sizes(n_right, k_right):
        sets.append((pos, pos + size))
        pos += size
    return SetSplit(sets, k_left + 1, (t_lo, t_hi))


def scale_stats(times, values) -> np.ndarray:
    """``[y_min, y_max, y_range, y_first, y_last, y_diff, t_first, t_last, t_diff]``."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] == 0:
        raise GapError("empty set")
    y_min, y_max = values.min(), values.max()
    t_diff = max(times[-1] - times[0], TAU_DIFF_FLOOR)
    return np.array([y_min, y_max, y_max - y_min, values[0], values[-1],
                     values[-1] - values[0], times[0], times[-1], t_diff])


class FIMGap(nn.Module):
    """Trainable part of the gap model: scale embedding, gap token and attention stack."""

    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        E, A = cfg.embed_dim, cfg.attn_dim
        self.scale_embed = nn.Linear(N_STATS, E)
        self.in_proj = nn.Identity() if A == E else nn.Linear(E, A)
        self.out_proj = nn.Identity() if A == E else nn.Linear(A, E)
        self.gap_token = nn.Parameter(torch.randn(A) * 0.02)
        self.attn = AttnEncoder(A, cfg.attn_heads, cfg.attn_layers, cfg.ffn_width,
                                K_SETS, cfg.dropout)

    def forward(self, set_u: torch.Tensor, stats: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
        """Gap context ``(B, E)`` from set embeddings ``(B, 4, E)``, stats ``(B, 4, 9)``
        and 1-based gap positions ``(B,)``."""
        tokens = self.in_proj(set_u + self.scale_embed(stats))
        B, n_obs, A = tokens.shape
        slots = torch.arange(n_obs).expand(B, -1)
        slots = slots + (slots >= (q.view(-1, 1) - 1)).long()
        seq = self.gap_token.expand(B, K_SETS, A)
        seq = seq.scatter(1, slots.unsqueeze(-1).expand(-1, -1, A), tokens)
        out = self.attn(seq)
        picked = out.gather(1, (q.view(-1, 1, 1) - 1).expand(-1, 1, A)).squeeze(1)
        return self.out_proj(picked)


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def encode_sets(local: fl.FIMLocal, times_n, values_n, split: SetSplit):
    """Frozen per-set context vectors ``(4, E)`` and scale statistics ``(4, 9)``.

    ``times_n``/``values_n`` are globally normalised; each set is normalised
    again locally before encoding, so a constant shift of a set's values leaves
    its embedding unchanged.
    """
    times_n = np.asarray(times_n, dtype=np.float64)
    values_n = np.asarray(values_n, dtype=np.float64)
    dt = next(local.parameters()).dtype
    seqs, stats = [], []
    for _, a, b in split.observed():
        t, y = times_n[a:b], values_n[a:b]
        stats.append(scale_stats(t, y))
        if b - a >= 2:
            tl, yl, _ = fl.normalize(t, y)
        else:
            tl, yl = np.zeros(1), np.zeros(1)
        seqs.append((tl, yl))
    lengths = [s[0].shape[0] for s in seqs]
    T = max(lengths)
    tt = torch.zeros(len(seqs), T, dtype=dt)
    yy = torch.zeros(len(seqs), T, dtype=dt)
    for i, (tl, yl) in enumerate(seqs):
        tt[i, :lengths[i]] = torch.as_tensor(tl, dtype=dt)
        yy[i, :lengths[i]] = torch.as_tensor(yl, dtype=dt)
    was = local.training
    local.eval()
    with torch.no_grad():
        u = local.encode(yy, tt, lengths)
    local.train(was)
    return u, torch.as_tensor(np.stack(stats), dtype=dt)


def gap_context(local: fl.FIMLocal, gap_model: FIMGap, times_n, values_n,
                split: SetSplit) -> torch.Tensor:
    u, s = encode_sets(local, times_n, values_n, split)
    q = torch.tensor([split.q])
    return gap_model(u[None], s[None], q)


def local_gap_time(t, gap):
    t_first, t_last = gap
    return (np.asarray(t, dtype=np.float64) - t_first) / max(t_last - t_first, TAU_DIFF_FLOOR)


def gap_query(local: fl.FIMLocal, u_q: torch.Tensor, t, gap, check: bool = True):
    """Derivative ``(mean, log_var)`` inside the gap, in the frame ``gap`` is given in."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if check and (np.any(t < gap[0] - 1e-12) or np.any(t > gap[1] + 1e-12)):
        raise GapError("query time outside the gap")
    diff = max(gap[1] - gap[0], TAU_DIFF_FLOOR)
    m, lv = fl.query(local, u_q, local_gap_time(t, gap))
    return m / diff, lv - 2.0 * np.log(diff)


# ---------------------------------------------------------------- stitching

def _gap_integral(f_fn, gap, t, n_grid: int = 128):
    """``int_{t_first}^{t} f`` and the full-gap integral, on a dense trapezoid grid."""
    grid = np.linspace(gap[0], gap[1], n_grid)
    fv = f_fn(grid)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (fv[1:] + fv[:-1]) * np.diff(grid))])
    return np.interp(t, grid, cum), cum[-1]


@dataclass
class Stitched:
    """Continuous trajectory joining left and right estimates across the gap."""

    left: object  # anything with x_hat(t) and f_hat(t)
    right: object
    gap_f: object  # callable t -> (mean, log_var) inside the gap
    gap: tuple
    n_grid: int = 128

    def _in_gap(self, t):
        x_l0 = float(self.left.x_hat([self.gap[0]])[0])
        x_r1 = float(self.right.x_hat([self.gap[1]])[0])
        integ, total = _gap_integral(lambda s: self.gap_f(s)[0], self.gap, t, self.n_grid)
        xl = x_l0 + integ
        xr = x_r1 - (total - integ)
        w_left = (self.gap[1] - t) / (self.gap[1] - self.gap[0])
        return xl, xr, w_left

    def blend_weights(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        w = (self.gap[1] - t) / (self.gap[1] - self.gap[0])
        return w, 1.0 - w

    def x_hat(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        out = np.empty_like(t)
        lo, hi = t < self.gap[0], t > self.gap[1]
        mid = ~(lo | hi)
        if lo.any():
            out[lo] = self.left.x_hat(t[lo])
        if hi.any():
            out[hi] = self.right.x_hat(t[hi])
        if mid.any():
            xl, xr, w = self._in_gap(t[mid])
            out[mid] = w * xl + (1.0 - w) * xr
        return out

    def f_hat(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        mean = np.empty_like(t)
        lv = np.empty_like(t)
        lo, hi = t < self.gap[0], t > self.gap[1]
        mid = ~(lo | hi)
        if lo.any():
            mean[lo], lv[lo] = self.left.f_hat(t[lo])
        if hi.any():
            mean[hi], lv[hi] = self.right.f_hat(t[hi])
        if mid.any():
            xl, xr, _ = self._in_gap(t[mid])
            m, v = self.gap_f(t[mid])
            # both extensions share the derivative; the blend adds (xr - xl) / gap length
            mean[mid] = m + (xr - xl) / (self.gap[1] - self.gap[0])
            lv[mid] = v
        return mean, lv


def stitch(left, right, gap_f, gap, n_grid: int = 128) -> Stitched:
    return Stitched(left, right, gap_f, (float(gap[0]), float(gap[1])), n_grid)


# ---------------------------------------------------------------- pipeline

def impute_gap(local: fl.FIMLocal, gap_model: FIMGap, times, values, gap) -> Stitched:
    """Full gap pipeline on a one-dimensional series, in original units."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    split = split_sets(times, gap)
    keep = (times < gap[0]) | (times > gap[1])
    times, values = times[keep], values[keep]
    tn, yn, norm = fl.normalize(times, values)
    gap_n = tuple(norm.times_to_norm(np.asarray(gap, dtype=np.float64)))
    split_n = split_sets(tn, gap_n)
    was = gap_model.training
    gap_model.eval()
    with torch.no_grad():
        u_q = gap_context(local, gap_model, tn, yn, split_n)
    gap_model.train(was)

    def gap_f(t):
        m, lv = gap_query(local, u_q, norm.times_to_norm(t), gap_n, check=False)
        return fl.renormalize_f(m, lv, norm)

    k_left = split.q - 1
    n_left = split.sets[split.q - 1][0]
    left = fl.compose_windows(local, times[:n_left], values[:n_left], fl.ByCount(k_left))
    right = fl.compose_windows(local, times[n_left:], values[n_left:],
                               fl.ByCount(N_OBSERVED_SETS - k_left))
    out = stitch(left, right, gap_f, gap)
    out.split = split
    return out
