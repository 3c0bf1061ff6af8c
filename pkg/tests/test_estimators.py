from dataclasses import asdict

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fimpute import fim_local as fl
from fimpute.estimators import FIMGapImputer, FIMImputer, SplineImputer, load_gap, load_local
from fimpute.recnet import ParameterStore


def _save(module, path, kind, cfg):
    ParameterStore.from_module(module, {"kind": kind, "net": asdict(cfg)}).save(path)


def test_clone_and_params():
    est = SplineImputer(7, 3)
    assert clone(est).get_params() == {"savgol_window": 7, "savgol_order": 3, "bc_type": "not-a-knot"}
    assert set(FIMImputer().get_params()) == {"weights", "model", "windows", "window_obs"}


def test_not_fitted():
    for est in (SplineImputer(), FIMImputer(), FIMGapImputer(gap=(0.4, 0.6))):
        with pytest.raises(NotFittedError):
            est.predict([0.5])


def test_spline_smoothing_params_must_pair(sine_series):
    with pytest.raises(ValueError):
        SplineImputer(savgol_window=7).fit(*sine_series)
    t, y = sine_series
    est = SplineImputer(7, 3).fit(t, y)
    assert np.max(np.abs(est.predict(t) - y)) < 1e-2
    d, lv = est.predict_derivative(t[5:-5])
    np.testing.assert_allclose(d, 3 * np.cos(3 * t[5:-5]) + 0.5, atol=0.1)
    assert np.all(np.isnan(lv))


def test_fim_imputer_matches_inference(local32, sine_series):
    t, y = sine_series
    est = FIMImputer(model=local32).fit(t, y)
    ref = fl.infer(local32, t, y)
    np.testing.assert_array_equal(est.predict(t), ref.x_hat(t))
    out = est.transform(t[:7])
    assert out.shape == (7, 3)


def test_fim_imputer_from_weights(tmp_path, local32, tiny_cfg, sine_series):
    _save(local32, tmp_path / "l.fimw", "local", tiny_cfg)
    a = FIMImputer(weights=str(tmp_path / "l.fimw")).fit(*sine_series)
    b = FIMImputer(model=local32).fit(*sine_series)
    np.testing.assert_array_equal(a.predict(sine_series[0]), b.predict(sine_series[0]))
    with pytest.raises(ValueError):
        load_gap(tmp_path / "l.fimw")
    with pytest.raises(ValueError):
        FIMImputer().fit(*sine_series)


def test_gap_imputer(tmp_path, local32, gap32, tiny_cfg, sine_series):
    _save(gap32, tmp_path / "g.fimw", "gap", tiny_cfg)
    with pytest.raises(ValueError):
        load_local(tmp_path / "g.fimw")
    t, y = sine_series
    keep = (t < 0.8) | (t > 1.2)
    est = FIMGapImputer((0.8, 1.2), model=local32, gap_weights=str(tmp_path / "g.fimw"))
    est.fit(t[keep], y[keep])
    assert np.all(np.isfinite(est.predict(t)))
