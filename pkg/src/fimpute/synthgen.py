"""Hierarchical synthetic data distribution for training the recognition models.

Each record is a random function ``f`` on a regular fine grid over [0, 1], its
integral ``x`` started from a standard-normal initial value, a random
observation grid and noisy observations of ``x`` on that grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np
from numpy.polynomial import chebyshev

logger = logging.getLogger(__name__)

L_MIN = 8
L_MIN_SET = 2
CHEB_MAX_DEGREE = 16
POINTWISE_GRID_LEN = 128
TEMPORAL_GRID_LEN = 256
N_OBSERVED_SETS = 4

_SURVIVAL_PROBS = np.array([0.0625, 0.25, 0.5])
_SURVIVAL_WEIGHTS = np.array([0.5, 0.25, 0.25])


class GenerationError(RuntimeError):
    """A sampler failed for one record."""


class Family(str, Enum):
    CHEBYSHEV = "chebyshev"
    GP_RBF = "gp_rbf"
    GP_PERIODIC = "gp_periodic"


class DatasetKind(str, Enum):
    POINTWISE = "pointwise"
    TEMPORAL = "temporal"


@dataclass(frozen=True)
class FineGridFunction:
    """Values of a scalar function on the regular grid ``t_i = i / (L - 1)``."""

    values: np.ndarray

    @property
    def grid_len(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return fine_grid(self.grid_len)


@dataclass(frozen=True)
class ObservationGrid:
    indices: np.ndarray
    scheme: str  # "regular" or "irregular"
    scheme_param: float  # stride or survival probability
    gap: tuple[int, int] | None = None

    def __len__(self):
        return self.indices.shape[0]


@dataclass
class GenerationRecord:
    f: np.ndarray
    x: np.ndarray
    grid: ObservationGrid
    y: np.ndarray
    sigma: float
    family: Family
    seed: int

    @property
    def x0(self) -> float:
        return float(self.x[0])

    @property
    def fine_grid_len(self) -> int:
        return self.f.shape[0]

    @property
    def obs_idx(self) -> np.ndarray:
        return self.grid.indices

    @property
    def obs_times(self) -> np.ndarray:
        return fine_grid(self.fine_grid_len)[self.grid.indices]

    @property
    def gap(self) -> tuple[int, int] | None:
        return self.grid.gap


@dataclass
class GenerationConfig:
    dataset_kind: DatasetKind = DatasetKind.POINTWISE
    n_records: int = 4096
    fine_grid_len: int | None = None
    noise_lambda: float | None = None
    family_mix: dict = field(default_factory=dict)
    base_seed: int = 0

    def __post_init__(self):
        self.dataset_kind = DatasetKind(self.dataset_kind)
        pointwise = self.dataset_kind is DatasetKind.POINTWISE
        if self.fine_grid_len is None:
            self.fine_grid_len = POINTWISE_GRID_LEN if pointwise else TEMPORAL_GRID_LEN
        if self.noise_lambda is None:
            self.noise_lambda = 0.1 if pointwise else 0.05
        if not self.family_mix:
            self.family_mix = (
                {Family.CHEBYSHEV: 0.5, Family.GP_RBF: 0.5}
                if pointwise
                else {Family.GP_PERIODIC: 1.0}
            )
        self.family_mix = {Family(k): float(v) for k, v in self.family_mix.items()}
        if self.n_records <= 0:
            raise ValueError("n_records must be positive")
        if any(p < 0 for p in self.family_mix.values()):
            raise ValueError("family_mix: probabilities must be non-negative")
        total = sum(self.family_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"family_mix: probabilities sum to {total:g}, expected 1")
        if self.noise_lambda < 0:
            raise ValueError("noise_lambda must be non-negative")
        if self.fine_grid_len < L_MIN:
            raise ValueError(f"fine_grid_len must be at least {L_MIN}")


def fine_grid(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def record_seed(base_seed: int, index: int) -> int:
    """Counter-based 64-bit seed for record ``index``; order independent."""
    ss = np.random.SeedSequence([int(base_seed) & (2**64 - 1), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------- functions

def zipf_pmf(max_degree: int = CHEB_MAX_DEGREE, exponent: float = 2.0) -> np.ndarray:
    m = np.arange(1, max_degree + 1, dtype=np.float64)
    w = m**-exponent
    return w / w.sum()


def sample_degree(rng: np.random.Generator) -> int:
    """Expansion degree from Zipf(2) truncated at 16."""
    return int(rng.choice(CHEB_MAX_DEGREE, p=zipf_pmf())) + 1


def sample_chebyshev(rng: np.random.Generator, grid_len: int = POINTWISE_GRID_LEN,
                     degree: int | None = None, coeffs=None) -> FineGridFunction:
    """Random truncated Chebyshev expansion ``sum_{m=1}^M a_m T_m(2t - 1)``.

    ``M`` follows a Zipf(2) law truncated at 16 and ``a_m ~ N(0, 1/M)``. Either
    may be forced for testing; forced coefficients are indexed from ``m = 1``.
    """
    if coeffs is not None:
        coeffs = np.asarray(coeffs, dtype=np.float64)
        degree = coeffs.shape[0]
    else:
        if degree is None:
            degree = sample_degree(rng)
        coeffs = rng.normal(0.0, np.sqrt(1.0 / degree), size=degree)
    u = 2.0 * fine_grid(grid_len) - 1.0
    # T_0 carries no weight
    return FineGridFunction(chebyshev.chebval(u, np.concatenate([[0.0], coeffs])))


def rbf_kernel(s, t, lengthscale: float) -> np.ndarray:
    d = np.subtract.outer(np.asarray(s, float), np.asarray(t, float))
    return np.exp(-0.5 * (d / lengthscale) ** 2)


def periodic_kernel(s, t, lengthscale: float, period: float) -> np.ndarray:
    d = np.abs(np.subtract.outer(np.asarray(s, float), np.asarray(t, float)))
    return np.exp(-2.0 * np.sin(np.pi * d / period) ** 2 / lengthscale**2)


def sample_rbf_lengthscale(rng: np.random.Generator) -> float:
    """Equal mixture of Beta(2, 10) and Beta(2, 5)."""
    if rng.random() < 0.5:
        return float(rng.beta(2.0, 10.0))
    return float(rng.beta(2.0, 5.0))


def sample_periodic_hyper(rng: np.random.Generator) -> tuple[float, float]:
    return float(rng.uniform(0.75, 1.0)), float(rng.uniform(0.3, 0.5))


def gram_cholesky(gram: np.ndarray) -> np.ndarray:
    """Cholesky factor with diagonal jitter escalating 1e-6 .. 1e-2 of the mean diagonal."""
    scale = float(np.mean(np.diag(gram)))
    eye = np.eye(gram.shape[0])
    jitter = 1e-6
    while jitter <= 1e-2 * (1 + 1e-9):
        try:
            return np.linalg.cholesky(gram + jitter * scale * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise GenerationError("Cholesky factorisation failed at maximum jitter")


def sample_gp(kernel: str, rng: np.random.Generator, grid_len: int = POINTWISE_GRID_LEN,
              lengthscale: float | None = None, period: float | None = None,
              n_samples: int | None = None) -> FineGridFunction | np.ndarray:
    """Zero-mean GP sample on the fine grid; hyperparameters drawn from their priors if omitted.

    With ``n_samples`` set, returns an ``(n_samples, grid_len)`` array sharing one
    Cholesky factor.
    """
    t = fine_grid(grid_len)
    if kernel == "rbf":
        if lengthscale is None:
            lengthscale = sample_rbf_lengthscale(rng)
        gram = rbf_kernel(t, t, lengthscale)
    elif kernel == "periodic":
        if lengthscale is None or period is None:
            ls, per = sample_periodic_hyper(rng)
            lengthscale = ls if lengthscale is None else lengthscale
            period = per if period is None else period
        gram = periodic_kernel(t, t, lengthscale, period)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    chol = gram_cholesky(gram)
    if n_samples is None:
        return FineGridFunction(chol @ rng.standard_normal(grid_len))
    return (chol @ rng.standard_normal((grid_len, n_samples))).T


def integrate_solution(f, x0: float) -> FineGridFunction:
    """``x(t) = x0 + int_0^t f`` by the cumulative trapezoidal rule on the fine grid."""
    values = np.asarray(getattr(f, "values", f), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise GenerationError("non-finite function values")
    h = 1.0 / (values.shape[0] - 1)
    x = np.empty_like(values)
    x[0] = 0.0
    np.cumsum(0.5 * h * (values[1:] + values[:-1]), out=x[1:])
    return FineGridFunction(x0 + x)


# ---------------------------------------------------------------- grids

def regular_grid(grid_len: int, stride: int) -> np.ndarray:
    return np.arange(0, grid_len, stride)


def sample_grid_pointwise(rng: np.random.Generator, grid_len: int = POINTWISE_GRID_LEN,
                          scheme: str | None = None, param=None) -> ObservationGrid:
    """Regular (stride U{1..16}) or Bernoulli-masked grid with at least 8 points.

    Scheme and survival rate are drawn once; only the Bernoulli mask is redrawn
    when it keeps fewer than 8 points, so the scheme split stays exactly even.
    """
    sch = scheme or ("regular" if rng.random() < 0.5 else "irregular")
    if sch == "regular":
        stride = int(param) if param is not None else int(rng.integers(1, 17))
        idx = regular_grid(grid_len, stride)
        if idx.shape[0] < L_MIN:
            raise GenerationError(f"stride {stride} leaves fewer than {L_MIN} points")
        return ObservationGrid(idx, sch, float(stride))
    if sch != "irregular":
        raise ValueError(f"unknown grid scheme {sch!r}")
    p = float(param) if param is not None else float(rng.choice(_SURVIVAL_PROBS, p=_SURVIVAL_WEIGHTS))
    if p * grid_len < 1:
        raise GenerationError(f"survival rate {p} too small for {grid_len} points")
    while True:
        idx = np.flatnonzero(rng.random(grid_len) < p)
        if idx.shape[0] >= L_MIN:
            return ObservationGrid(idx, sch, p)


def equal_split_sizes(n: int, k: int = N_OBSERVED_SETS) -> list[int]:
    """Contiguous equal-count split sizes, remainder spread left to right."""
    base, rem = divmod(n, k)
    return [base + (1 if i < rem else 0) for i in range(k)]


def sample_grid_temporal(rng: np.random.Generator, grid_len: int = TEMPORAL_GRID_LEN,
                         gap_len: int | None = None, position: int | None = None,
                         base_indices=None) -> ObservationGrid:
    """Point-wise grid followed by removal of a contiguous run of 10..30 observations.

    The observations left over are split into four equal sets; the gap sits after
    set ``position`` (1, 2 or 3), so it never touches either end of the series.
    """
    while True:
        if base_indices is not None:
            idx = np.asarray(base_indices)
            sch, p = "given", float("nan")
        elif rng.random() < 0.5:
            stride = int(rng.integers(1, 5))
            idx, sch, p = regular_grid(grid_len, stride), "regular", float(stride)
        else:
            idx, sch, p = np.flatnonzero(rng.random(grid_len) < 0.5), "irregular", 0.5
        g = int(gap_len) if gap_len is not None else int(rng.integers(10, 31))
        pos = int(position) if position is not None else int(rng.integers(1, 4))
        remaining = idx.shape[0] - g
        if remaining < N_OBSERVED_SETS * L_MIN_SET or idx.shape[0] < L_MIN:
            if base_indices is not None:
                raise GenerationError("too few observations for the requested gap")
            continue
        sizes = equal_split_sizes(remaining, N_OBSERVED_SETS)
        start = sum(sizes[:pos])
        gap_idx = idx[start:start + g]
        keep = np.concatenate([idx[:start], idx[start + g:]])
        return ObservationGrid(keep, sch, p, gap=(int(gap_idx[0]), int(gap_idx[-1])))


# ---------------------------------------------------------------- noise

def apply_noise(x_at_obs, lam: float, rng: np.random.Generator):
    """Folded-normal noise level ``sigma = |N(0, lam)|`` then ``y ~ N(x, sigma)``."""
    x_at_obs = np.asarray(x_at_obs, dtype=np.float64)
    sigma = abs(float(rng.normal(0.0, lam))) if lam > 0 else 0.0
    y = x_at_obs + sigma * rng.standard_normal(x_at_obs.shape[0])
    return y, sigma


# ---------------------------------------------------------------- records

def generate_record(cfg: GenerationConfig, index: int) -> GenerationRecord:
    seed = record_seed(cfg.base_seed, index)
    rng = np.random.default_rng(seed)
    families = list(cfg.family_mix)
    probs = np.array([cfg.family_mix[k] for k in families])
    family = families[int(rng.choice(len(families), p=probs / probs.sum()))]
    L = cfg.fine_grid_len
    if family is Family.CHEBYSHEV:
        f = sample_chebyshev(rng, L)
    elif family is Family.GP_RBF:
        f = sample_gp("rbf", rng, L)
    else:
        f = sample_gp("periodic", rng, L)
    x0 = float(rng.standard_normal())
    x = integrate_solution(f, x0)
    if cfg.dataset_kind is DatasetKind.POINTWISE:
        grid = sample_grid_pointwise(rng, L)
    else:
        grid = sample_grid_temporal(rng, L)
    y, sigma = apply_noise(x.values[grid.indices], cfg.noise_lambda, rng)
    return GenerationRecord(f.values, x.values, grid, y, sigma, family, seed)


def generate_dataset(cfg: GenerationConfig, start: int = 0) -> Iterator[GenerationRecord]:
    """Stream records ``start .. n_records - 1``; failed records are logged and skipped."""
    for j in range(start, cfg.n_records):
        try:
            yield generate_record(cfg, j)
        except GenerationError as exc:
            logger.warning("record %d skipped: %s", j, exc)
