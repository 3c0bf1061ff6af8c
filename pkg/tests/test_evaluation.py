import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fimpute import evaluation as ev
from fimpute.estimators import SplineImputer
from fimpute.odesim import simulate_builtin


def naive_metrics(x, xh, m):
    """Loop-based reference for the masked metrics and unmasked mean R^2."""
    n, d = len(x), len(x[0])
    s_abs = s_sq = s_ref = cnt = 0.0
    for i in range(n):
        for j in range(d):
            if m[i][j]:
                e = x[i][j] - xh[i][j]
                s_abs += abs(e)
                s_sq += e * e
                s_ref += abs(x[i][j])
                cnt += 1
    r2s = []
    for j in range(d):
        mean = 0.0
        for i in range(n):
            mean += x[i][j]
        mean /= n
        ss_res = ss_tot = 0.0
        for i in range(n):
            ss_res += (x[i][j] - xh[i][j]) ** 2
            ss_tot += (x[i][j] - mean) ** 2
        r2s.append(1.0 - ss_res / ss_tot)
    return s_abs / cnt, s_sq / cnt, math.sqrt(s_sq / cnt), s_abs / s_ref, sum(r2s) / d


def random_instance(rng):
    n, d = rng.integers(3, 40), rng.integers(1, 4)
    x = rng.normal(size=(n, d))
    xh = x + rng.normal(scale=0.3, size=(n, d))
    m = (rng.random((n, d)) < 0.6).astype(int)
    m[0, 0] = 1
    return x, xh, m


def test_metrics_worked_example():
    r = ev.metrics([1.0, 2.0], [1.0, 3.0])
    assert r.mae == 0.5 and r.mse == 0.5
    assert r.rmse == math.sqrt(0.5)
    assert r.mre == pytest.approx(1 / 3, abs=1e-15)


def test_metrics_perfect_and_mean_prediction():
    x = np.array([[1.0, 0.0], [2.0, 5.0], [4.0, 1.0]])
    r = ev.metrics(x, x)
    assert r.mae == r.mse == r.mre == 0.0 and r.r2 == 1.0
    r = ev.metrics(x, np.broadcast_to(x.mean(0), x.shape))
    assert r.r2 == pytest.approx(0.0, abs=1e-15)


def test_metrics_match_naive_reference():
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, xh, m = random_instance(rng)
        r = ev.metrics(x, xh, m)
        ref = naive_metrics(x.tolist(), xh.tolist(), m.tolist())
        got = (r.mae, r.mse, r.rmse, r.mre, r.r2)
        assert max(abs(a - b) for a, b in zip(got, ref)) < 1e-12


def test_masked_metrics_ignore_masked_predictions():
    rng = np.random.default_rng(1)
    x, xh, m = random_instance(rng)
    xh2 = xh.copy()
    xh2[m == 0] = np.nan
    a, b = ev.metrics(x, xh, m, with_r2=False), ev.metrics(x, xh2, m, with_r2=False)
    assert (a.mae, a.mse, a.mre) == (b.mae, b.mse, b.mre)


def test_metrics_errors():
    with pytest.raises(ev.MetricError, match="empty"):
        ev.metrics([1.0, 2.0], [1.0, 2.0], [0, 0])
    with pytest.raises(ev.MetricError, match="zero-variance"):
        ev.metrics([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(ev.MetricError):
        ev.metrics([1.0, 2.0], [1.0, 2.0, 3.0])
    with pytest.raises(ev.MetricError):
        ev.metrics([1.0, 2.0], [1.0, 2.0], [0.5, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_rmse_squared_is_mse(seed):
    x, xh, m = random_instance(np.random.default_rng(seed))
    r = ev.metrics(x, xh, m)
    assert r.rmse**2 == pytest.approx(r.mse, rel=1e-15)


def test_r2_accuracy_and_aggregate():
    reps = [ev.MetricReport(1, 1, 1, 1, r2) for r2 in (0.95, 0.5, 0.91, 0.9)]
    assert ev.r2_accuracy(reps) == 0.5
    agg = ev.aggregate(reps)
    assert agg["mae"] == (1.0, 0.0)
    assert agg["r2_accuracy"][0] == 0.5


def test_spline_interpolates_and_reproduces_cubics():
    t = np.sort(np.random.default_rng(2).uniform(0, 3, 25))
    np.testing.assert_array_equal(ev.spline_baseline(t, np.sin(t)).x_hat(t), np.sin(t))
    p = lambda s: 0.3 * s**3 - s**2 + 2.0 * s - 1.0  # noqa: E731
    q = np.linspace(t[0], t[-1], 200)
    np.testing.assert_allclose(ev.spline_baseline(t, p(t)).x_hat(q), p(q), atol=1e-8)


def test_natural_spline_has_zero_end_curvature():
    t = np.linspace(0, 1, 10)
    sp = ev.spline_baseline(t, t**3, bc_type="natural")
    np.testing.assert_allclose(sp._cs(t[[0, -1]], 2), 0.0, atol=1e-10)
    with pytest.raises(ValueError):
        ev.spline_baseline(t, t, bc_type="bogus")


def test_savgol_exact_on_polynomials():
    rng = np.random.default_rng(3)
    t = np.sort(rng.uniform(0, 2, 40))
    for order in (0, 1, 2, 3):
        coef = rng.normal(size=order + 1)
        y = np.polyval(coef, t)
        np.testing.assert_allclose(ev.savgol_smooth(t, y, 7, order), y, atol=1e-9)
        np.testing.assert_allclose(ev.savgol_smooth(t, y, 15, 3), y, atol=1e-9)


def test_savgol_validation():
    with pytest.raises(ValueError):
        ev.savgol_smooth(np.arange(10.0), np.arange(10.0), 8, 3)
    with pytest.raises(ValueError):
        ev.savgol_smooth(np.arange(10.0), np.arange(10.0), 3, 3)


def test_savgol_smooths_noise():
    t = np.linspace(0, 1, 200)
    rng = np.random.default_rng(4)
    y = np.sin(4 * t)
    noisy = y + rng.normal(scale=0.1, size=t.shape)
    sm = ev.savgol_smooth(t, noisy, 15, 3)
    assert np.mean(np.abs(sm - y)) < 0.6 * np.mean(np.abs(noisy - y))


def test_phase_portrait_columns(local32):
    t = np.linspace(0, 1, 40)
    cols = ev.phase_portrait(local32, t, t**2 / 2, depth=1, grid_len=33)
    assert list(cols) == ["t", "x", "dx"] and len(cols["x"]) == 33
    cols = ev.phase_portrait(local32, t, t, depth=2, grid_len=21, dense_len=512)
    assert list(cols) == ["t", "x", "dx", "ddx"] and len(cols["ddx"]) == 21
    with pytest.raises(ValueError):
        ev.phase_portrait(local32, t, t, depth=3)


def test_columns_csv_and_svg(tmp_path):
    cols = {"t": np.arange(3.0), "x": np.array([1.0, 2.0, np.nan])}
    ev.write_columns_csv(tmp_path / "c.csv", cols)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "t,x"
    svg = ev.svg_lines(cols, "t", ["x"])
    assert svg.startswith("<svg") and "polyline" in svg


def _small_bench(**kw):
    trajs = {"vanderpol": simulate_builtin("vanderpol", 128)}
    return ev.benchmark(trajs, {"spline": SplineImputer(), "spline2": SplineImputer()},
                        n_seeds=3, base_seed=5, **kw)


def test_benchmark_rows_and_default_grid():
    assert sorted(ev.DEFAULT_CORRUPTIONS) == [(0.0, 0.0), (0.0, 0.05), (0.5, 0.0), (0.5, 0.05)]
    rows = _small_bench()
    cells = {(r.system, r.rho, r.gamma, r.imputer) for r in rows}
    assert len(cells) == 1 * 4 * 2
    clean = [r for r in rows if (r.rho, r.gamma, r.metric) == (0.0, 0.0, "mae")]
    assert all(r.mean == 0.0 for r in clean)
    by = {}
    for r in rows:
        by.setdefault((r.rho, r.gamma, r.metric), set()).add((r.mean, r.std))
    # identical imputers give identical numbers
    assert all(len(v) == 1 for v in by.values())


def test_benchmark_failed_cells_and_missing_mode(tmp_path):
    trajs = {"vdp": simulate_builtin("vanderpol", 64)}
    rows = ev.benchmark(trajs, {"bad": SplineImputer(8, 3)}, [(0.5, 0.0)], n_seeds=2)
    assert len(rows) == 1 and rows[0].error.startswith("ValueError")
    rows = ev.benchmark(trajs, {"s": SplineImputer()}, [(0.5, 0.0)], n_seeds=2,
                        mask_mode="missing")
    assert all(r.mask_mode == "missing" for r in rows) and not rows[0].error
    ev.write_report(rows, tmp_path / "r.csv", tmp_path / "r.json")
    assert len(json.loads((tmp_path / "r.json").read_text())) == len(rows)


def test_benchmark_corruption_makes_spline_worse():
    trajs = {"lorenz": simulate_builtin("lorenz", 512)}
    rows = ev.benchmark(trajs, {"spline": SplineImputer()}, [(0.0, 0.0), (0.5, 0.05)], n_seeds=10)
    mae = {(r.rho, r.gamma): r.mean for r in rows if r.metric == "mae"}
    assert mae[(0.5, 0.05)] > mae[(0.0, 0.0)]
