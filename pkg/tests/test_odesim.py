import numpy as np
import pytest
from scipy.linalg import expm

from fimpute import odesim as od


def test_exponential_decay_oracle():
    tr = od.rk4_simulate(lambda t, x: -x, [1.0], 10.0, 512)
    np.testing.assert_allclose(tr.states[:, 0], np.exp(-tr.times), atol=1e-9)


def test_linear_system_matches_matrix_exponential():
    A = np.array([[0.0, 1.0], [-4.0, -0.3]])
    x0 = np.array([1.0, 0.0])
    tr = od.rk4_simulate(lambda t, x: A @ x, x0, 10.0, 512)
    want = np.stack([expm(A * t) @ x0 for t in tr.times])
    assert np.max(np.abs(tr.states - want)) < 1e-6


def test_convergence_order_is_four():
    errs = []
    for sub in (1, 2, 4, 8):
        tr = od.rk4_simulate(lambda t, x: -x * np.cos(t), [1.0], 10.0, 64, substeps=sub)
        errs.append(abs(tr.states[-1, 0] - np.exp(-np.sin(10.0))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all((orders > 3.5) & (orders < 4.5))


def test_blowup_raises_with_time():
    with pytest.raises(od.IntegrationError, match="t="), np.errstate(over="ignore"):
        od.rk4_simulate(lambda t, x: x**2, [1.0], 5.0, 64)


def test_builtin_systems():
    systems = od.builtin_systems()
    assert set(systems) == {"vanderpol", "rossler", "lorenz"}
    lor = od.simulate_builtin("lorenz")
    assert lor.states.shape == (512, 3)
    np.testing.assert_array_equal(lor.states[0], [2.3, 8.1, 12.4])
    assert lor.times[-1] == 10.0
    for name in systems:
        assert np.all(np.isfinite(od.simulate_builtin(name, 128).states))


def test_lorenz_vector_field_parameters():
    f = od.lorenz().vector_field
    np.testing.assert_allclose(f(0, np.array([1.0, 2.0, 3.0])),
                               [10.0 * (2 - 1), 1 * (28 - 3) - 2, 1 * 2 - 8 / 3 * 3])


def test_corruption_shared_mask_and_noise():
    tr = od.simulate_builtin("vanderpol", 512)
    c = od.corrupt(tr, od.CorruptionSpec(0.5, 0.05, 3))
    assert c.series.values.shape == (int(c.keep.sum()), 2)
    np.testing.assert_array_equal(c.series.times, tr.times[c.keep])
    ratio = c.series.values / tr.states[c.keep] - 1.0
    assert abs(np.std(ratio) / 0.05 - 1) < 0.15


def test_corruption_identity_and_determinism():
    tr = od.simulate_builtin("rossler", 128)
    c = od.corrupt(tr, od.CorruptionSpec(0.0, 0.0, 0))
    np.testing.assert_array_equal(c.series.values, tr.states)
    a = od.corrupt(tr, od.CorruptionSpec(0.3, 0.05, 9))
    b = od.corrupt(tr, od.CorruptionSpec(0.3, 0.05, 9))
    np.testing.assert_array_equal(a.series.values, b.series.values)


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        od.CorruptionSpec(1.0, 0.0, 0)
    with pytest.raises(ValueError):
        od.CorruptionSpec(0.2, -0.1, 0)


def test_trajectory_csv_roundtrip(tmp_path):
    tr = od.simulate_builtin("lorenz", 64)
    od.write_trajectory_csv(tmp_path / "l.csv", tr)
    back = od.read_trajectory_csv(tmp_path / "l.csv")
    np.testing.assert_array_equal(back.times, tr.times)
    np.testing.assert_array_equal(back.states, tr.states)
