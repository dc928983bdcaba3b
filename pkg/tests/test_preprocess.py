import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepmide.exceptions import DataError
from deepmide.preprocess import (BoxCoxParam, BoxCoxTransformer, DiurnalDetrender, apply_box_cox,
                                 asymmetry, diurnal_design, epoch_hours, fit_box_cox,
                                 fit_diurnal_series, invert_box_cox, semivariogram, wind_regime)

from conftest import make_panel


def sample_box_cox(lmbda, n, rng):
    # Gaussian in the transformed scale, at least 3.5 sd inside the support
    mu, sd = {0.0: (1.5, 0.5), 0.5: (2.0, 0.8), 1.0: (3.0, 0.8)}[lmbda]
    w = mu + sd * np.clip(rng.standard_normal(n), -3.5, 3.5)
    return invert_box_cox(w, BoxCoxParam(lmbda))


@pytest.mark.parametrize("lmbda", [0.0, 0.5, 1.0])
def test_box_cox_lambda_recovery(lmbda, rng):
    v = sample_box_cox(lmbda, 20_000, rng)
    assert abs(fit_box_cox(v).lmbda - lmbda) <= 0.05


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 1.0), st.lists(st.floats(0.05, 40.0), min_size=1, max_size=20))
def test_box_cox_round_trip(lmbda, vals):
    p = BoxCoxParam(round(lmbda, 2))
    v = np.array(vals)
    np.testing.assert_allclose(invert_box_cox(apply_box_cox(v, p), p), v, rtol=1e-9)


def test_box_cox_errors_and_clip():
    with pytest.raises(DataError):
        apply_box_cox(np.array([0.0]), BoxCoxParam(0.5))
    with pytest.raises(DataError):
        invert_box_cox(np.array([-3.0]), BoxCoxParam(0.5))
    assert invert_box_cox(np.array([-3.0]), BoxCoxParam(0.5), clip=True)[0] == 0.0
    with pytest.raises(DataError):
        fit_box_cox(np.array([1.0, 2.0]))


def test_box_cox_transformer_estimator(rng):
    v = sample_box_cox(0.5, 5000, rng)
    tr = BoxCoxTransformer().fit(v)
    assert abs(tr.param_.lmbda - 0.5) <= 0.05
    np.testing.assert_allclose(tr.inverse_transform(tr.transform(v)), v, rtol=1e-9)
    assert BoxCoxTransformer(lmbda=0.3).fit(v).param_.lmbda == 0.3


def test_diurnal_residuals_orthogonal_to_design(rng):
    times = 1_600_000_000 + 600 * np.arange(700)
    hours = epoch_hours(times)
    y = 3 + 0.5 * np.sin(2 * np.pi * hours / 24) + rng.normal(0, 0.3, hours.size)
    y[rng.random(y.size) < 0.1] = np.nan
    fit = fit_diurnal_series(hours, y)
    ok = np.isfinite(y)
    X = diurnal_design(hours[ok])
    assert np.abs(X.T @ fit.residuals[ok]).max() <= 1e-8 * np.abs(y[ok]).sum()
    assert np.isnan(fit.residuals[~ok]).all()


def test_diurnal_recovers_exact_harmonics():
    hours = epoch_hours(1_600_000_000 + 600 * np.arange(300))
    coef = np.array([2.0, 0.3, -0.2, 0.1, 0.05])
    fit = fit_diurnal_series(hours, diurnal_design(hours) @ coef)
    np.testing.assert_allclose(fit.coef, coef, atol=1e-10)
    with pytest.raises(DataError):
        fit_diurnal_series(hours[:100], np.ones(100))  # under 24 h


def test_detrender_panel_round_trip(rng):
    times = 1_600_000_000 + 600 * np.arange(300)
    X = rng.normal(3, 1, (300, 2, 2))
    det = DiurnalDetrender().fit(X, times)
    np.testing.assert_allclose(det.inverse_transform(det.transform(X, times), times), X)
    assert det.coef_.shape == (2, 2, 5)


def brute_semivariogram(r, g, i, j, u):
    terms = []
    for t in range(r.shape[0] - u - 1):
        a, b = r[t + u, i, g], r[t, j, g]
        if np.isfinite(a) and np.isfinite(b):
            terms.append(0.5 * (a - b) ** 2)
    return sum(terms) / len(terms)


def test_semivariogram_brute_force(rng):
    r = rng.standard_normal((40, 3, 2))
    r[5, 1, 0] = np.nan
    for u in (0, 1, 4):
        assert semivariogram(r, 0, 1, 2, u) == pytest.approx(brute_semivariogram(r, 0, 1, 2, u), rel=1e-13)
    a = asymmetry(r, 1, 0, 2, 3)
    assert a.value == pytest.approx(semivariogram(r, 1, 0, 2, 3) - semivariogram(r, 1, 2, 0, 3))
    with pytest.raises(DataError):
        semivariogram(r, 0, 0, 1, 39)


def test_asymmetry_sign_for_downstream_lag():
    # site 1 sees site 0's series three steps later
    rng = np.random.default_rng(3)
    x = rng.standard_normal(2000)
    r = np.zeros((1997, 2, 1))
    r[:, 0, 0] = x[3:]
    r[:, 1, 0] = x[:-3]
    # delta(s1, s0, 3) is zero, the reverse ordering is not
    assert asymmetry(r, 0, 1, 0, 3).value < 0
    assert asymmetry(r, 0, 0, 1, 3).value > 0


def test_wind_regime_threshold():
    speeds = np.array([[[7.9, 8.1]], [[9.0, 9.0]], [[1.0, np.nan]]])
    np.testing.assert_array_equal(wind_regime(speeds), [True, True, False])


def test_regime_filter_needs_speeds():
    r = np.zeros((10, 2, 1))
    with pytest.raises(ValueError):
        asymmetry(r, 0, 0, 1, 1, regime="weak")
    with pytest.raises(DataError):
        asymmetry(r, 0, 0, 1, 1, regime="strong", speeds=np.ones((10, 2, 1)))


def test_box_cox_fit_on_panel_ignores_missing(rng):
    v = sample_box_cox(1.0, 3000, rng).reshape(1000, 3, 1)
    v[::7, 0, 0] = np.nan
    assert abs(fit_box_cox(make_panel(v)).lmbda - 1.0) <= 0.05
