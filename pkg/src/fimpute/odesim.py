"""Benchmark dynamical systems, a fixed-step RK4 integrator and ODEBench-style corruption."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .series import TimeSeries


class IntegrationError(RuntimeError):
    pass


class CorruptionError(RuntimeError):
    pass


@dataclass(frozen=True)
class DynamicalSystem:
    name: str
    dim: int
    vector_field: Callable[[float, np.ndarray], np.ndarray]
    x0: tuple = ()
    t_end: float = 10.0


@dataclass(frozen=True)
class CorruptionSpec:
    rho: float = 0.0
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must lie in [0, 1)")
        if self.gamma < 0.0:
            raise ValueError("gamma must be non-negative")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_points, dim)
    name: str = ""


@dataclass
class CorruptedTrajectory:
    series: TimeSeries  # kept points only, all channels
    keep: np.ndarray  # bool over the full grid, shared by every channel


def rk4_simulate(system, x0, t_end: float, n_points: int, substeps: int = 8) -> Trajectory:
    """Classical RK4 with ``substeps`` internal steps per output interval."""
    if n_points < 2:
        raise ValueError("n_points must be at least 2")
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    fn = system.vector_field if isinstance(system, DynamicalSystem) else system
    x = np.atleast_1d(np.asarray(x0, dtype=np.float64)).copy()
    times = np.linspace(0.0, t_end, n_points)
    out = np.empty((n_points, x.shape[0]))
    out[0] = x
    h = (times[1] - times[0]) / substeps
    t = 0.0
    for i in range(1, n_points):
        for s in range(substeps):
            t = times[i - 1] + s * h
            k1 = fn(t, x)
            k2 = fn(t + 0.5 * h, x + 0.5 * h * k1)
            k3 = fn(t + 0.5 * h, x + 0.5 * h * k2)
            k4 = fn(t + h, x + h * k3)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"state became non-finite at t={times[i]:.6g}")
        out[i] = x
    name = system.name if isinstance(system, DynamicalSystem) else ""
    return Trajectory(times, out, name)


def van_der_pol(mu: float = 0.5) -> DynamicalSystem:
    def field(t, s):
        x, v = s
        return np.array([v, mu * (1.0 - x * x) * v - x])

    return DynamicalSystem(f"vanderpol_mu{mu:g}", 2, field, (3.0, 0.0))


def rossler() -> DynamicalSystem:
    def field(t, s):
        x, y, z = s
        return np.array([-5.0 * (y + z), 5.0 * (0.2 * y + x), 5.0 * (0.2 + z * (-5.7 + x))])

    return DynamicalSystem("rossler", 3, field, (2.3, 1.1, 0.8))


def lorenz(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> DynamicalSystem:
    def field(t, s):
        x, y, z = s
        return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])

    return DynamicalSystem("lorenz", 3, field, (2.3, 8.1, 12.4))


def builtin_systems() -> dict[str, DynamicalSystem]:
    return {"vanderpol": van_der_pol(0.5), "rossler": rossler(), "lorenz": lorenz()}


def simulate_builtin(name: str, n_points: int = 512, substeps: int = 8) -> Trajectory:
    sys_ = builtin_systems()[name]
    return rk4_simulate(sys_, sys_.x0, sys_.t_end, n_points, substeps)


def corrupt(traj: Trajectory, spec: CorruptionSpec) -> CorruptedTrajectory:
    """Drop grid points with probability rho (mask shared by channels), then y = (1 + eps) x."""
    rng = np.random.default_rng(spec.seed)
    n, dim = traj.states.shape
    keep = rng.random(n) >= spec.rho if spec.rho > 0 else np.ones(n, dtype=bool)
    if not keep.any():
        raise CorruptionError("every observation was dropped")
    kept = traj.states[keep]
    if spec.gamma > 0:
        kept = kept * (1.0 + rng.normal(0.0, spec.gamma, size=kept.shape))
    else:
        kept = kept.copy()
    return CorruptedTrajectory(TimeSeries(traj.times[keep], kept), keep)


def write_trajectory_csv(path, traj: Trajectory, keep: np.ndarray | None = None) -> None:
    from .datasets import atomic_path

    dim = traj.states.shape[1]
    header = ["t"] + [f"x{d + 1}" for d in range(dim)]
    if keep is not None:
        header += [f"mask{d + 1}" for d in range(dim)]
    with atomic_path(path) as tmp, open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, t in enumerate(traj.times):
            row = [repr(float(t))] + [repr(float(v)) for v in traj.states[i]]
            if keep is not None:
                row += [int(keep[i])] * dim
            w.writerow(row)


def read_trajectory_csv(path) -> Trajectory:
    data = np.genfromtxt(path, delimiter=",", names=True)
    names = [n for n in data.dtype.names if n.startswith("x")]
    return Trajectory(np.asarray(data["t"], float),
                      np.column_stack([data[n] for n in names]), str(path))
