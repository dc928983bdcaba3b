"""Box-Cox transform, diurnal detrending and space-time asymmetry diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .domain import ObservationPanel
from .exceptions import DataError
from .validation import check_fitted

STRONG_WIND_MPS = 8.0
LAMBDA_GRID = np.round(np.arange(0.0, 1.0 + 1e-9, 0.01), 2)


# --------------------------------------------------------------------------
# Box-Cox
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxCoxParam:
    lmbda: float
    offset: float = 0.0


def apply_box_cox(v, param: BoxCoxParam):
    v = np.asarray(v, dtype=float) + param.offset
    if np.any(v[np.isfinite(v)] <= 0):
        raise DataError("Box-Cox input must exceed -offset")
    if param.lmbda == 0:
        return np.log(v)
    return (v ** param.lmbda - 1.0) / param.lmbda


def invert_box_cox(w, param: BoxCoxParam, clip: bool = False):
    """Inverse transform.

    For ``lmbda > 0`` the transform's range is ``w > -1/lmbda``; values
    outside raise unless ``clip`` is set, in which case they map to the
    lower end of the support.
    """
    w = np.asarray(w, dtype=float)
    lam = param.lmbda
    if lam == 0:
        return np.exp(w) - param.offset
    base = 1.0 + lam * w
    bad = base <= 0
    if np.any(bad & np.isfinite(base)):
        if not clip:
            raise DataError("value outside the Box-Cox transform range")
        base = np.where(bad, 0.0, base)
    return base ** (1.0 / lam) - param.offset


def box_cox_profile_loglik(v, lmbda: float) -> float:
    """Profile Gaussian log-likelihood of ``lmbda`` (mean and variance
    concentrated out), including the Jacobian term."""
    w = apply_box_cox(v, BoxCoxParam(lmbda))
    return float(-0.5 * v.size * np.log(w.var()) + (lmbda - 1.0) * np.log(v).sum())


def fit_box_cox(values, offset: float = 0.0, grid=LAMBDA_GRID) -> BoxCoxParam:
    """Grid-search the Box-Cox power over ``[0, 1]`` (step 0.01).

    ``values`` may be an :class:`ObservationPanel` or any array; missing
    entries are ignored and one global power is fitted.
    """
    if isinstance(values, ObservationPanel):
        values = values.values[values.mask]
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)] + offset
    if v.size < 3:
        raise DataError("too few values to fit a Box-Cox transform")
    if np.any(v <= 0):
        raise DataError("Box-Cox fit needs values > -offset; set a positive offset for zero speeds")
    ll = [box_cox_profile_loglik(v, lam) for lam in grid]
    return BoxCoxParam(float(grid[int(np.argmax(ll))]), float(offset))


class BoxCoxTransformer(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``lmbda=None`` fits the power, a number fixes it."""

    def __init__(self, lmbda=None, offset=0.0):
        self.lmbda = lmbda
        self.offset = offset

    def fit(self, X, y=None):
        if self.lmbda is None:
            self.param_ = fit_box_cox(X, self.offset)
        else:
            self.param_ = BoxCoxParam(float(self.lmbda), float(self.offset))
        return self

    def transform(self, X):
        check_fitted(self, "param_")
        return apply_box_cox(X, self.param_)

    def inverse_transform(self, X):
        check_fitted(self, "param_")
        return invert_box_cox(X, self.param_, clip=True)


# --------------------------------------------------------------------------
# diurnal trend
# --------------------------------------------------------------------------

def diurnal_design(hours) -> np.ndarray:
    h = np.asarray(hours, dtype=float)
    w = 2.0 * np.pi * h / 24.0
    return np.column_stack([np.ones_like(h), np.sin(w), np.cos(w), np.sin(2 * w), np.cos(2 * w)])


def epoch_hours(times) -> np.ndarray:
    return np.asarray(times, dtype=np.int64) / 3600.0


@dataclass
class DiurnalFit:
    coef: np.ndarray  # d0..d4
    residuals: np.ndarray  # same length as the input, NaN where missing

    def trend(self, hours):
        return diurnal_design(hours) @ self.coef


def fit_diurnal_series(hours, y) -> DiurnalFit:
    """OLS on ``{1, sin, cos}`` at the 24 h and 12 h periods; ``hours`` is
    clock time in hours so the harmonic phase is shared across windows."""
    hours = np.asarray(hours, dtype=float)
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(y)
    if ok.sum() < 5 or np.ptp(hours[ok]) < 24.0 - 1e-9:
        raise DataError("diurnal fit needs at least 5 observations spanning 24 h")
    X = diurnal_design(hours)
    coef, _, rank, _ = np.linalg.lstsq(X[ok], y[ok], rcond=None)
    if rank < X.shape[1]:
        raise DataError("rank-deficient diurnal design")
    resid = np.full_like(y, np.nan)
    resid[ok] = y[ok] - X[ok] @ coef
    return DiurnalFit(coef, resid)


def fit_diurnal(panel: ObservationPanel, site: int, height: int, transform: BoxCoxParam | None = None) -> DiurnalFit:
    y = panel.values[:, site, height]
    if transform is not None:
        y = np.where(panel.mask[:, site, height], apply_box_cox(np.nan_to_num(y, nan=1.0), transform), np.nan)
    return fit_diurnal_series(epoch_hours(panel.times), y)


class DiurnalDetrender(TransformerMixin, BaseEstimator):
    """Per-(site, height) diurnal harmonic trend on ``(T, m, G)`` arrays.

    ``fit`` and ``transform`` take the array together with its timestamps
    (epoch seconds).
    """

    def fit(self, X, times):
        X = np.asarray(X, dtype=float)
        hours = epoch_hours(times)
        _, m, G = X.shape
        self.coef_ = np.empty((m, G, 5))
        for i in range(m):
            for g in range(G):
                self.coef_[i, g] = fit_diurnal_series(hours, X[:, i, g]).coef
        return self

    def trend(self, times):
        check_fitted(self, "coef_")
        return np.einsum("tk,igk->tig", diurnal_design(epoch_hours(times)), self.coef_)

    def transform(self, X, times):
        return np.asarray(X, dtype=float) - self.trend(times)

    def inverse_transform(self, X, times):
        return np.asarray(X, dtype=float) + self.trend(times)


# --------------------------------------------------------------------------
# semivariogram and asymmetry
# --------------------------------------------------------------------------

def _pair_terms(residuals, g, i, j, u, keep=None):
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 1:
        raise ValueError("residuals must be (N, m) or (N, m, G)")
    if r.ndim == 2:
        r = r[:, :, None]
    N = r.shape[0]
    n_terms = N - u - 1
    if u < 0 or n_terms < 1:
        raise DataError(f"lag {u} leaves no terms for N={N}")
    lead = r[u:u + n_terms, i, g]
    base = r[:n_terms, j, g]
    ok = np.isfinite(lead) & np.isfinite(base)
    if keep is not None:
        ok &= np.asarray(keep, dtype=bool)[:n_terms]
    return lead, base, ok


def semivariogram(residuals, g, i, j, u, keep=None) -> float:
    """Space-time semivariogram ``delta(s_i, s_j, u)`` at height ``g``.

    Averages ``(r_{t+u}(s_i) - r_t(s_j))^2 / 2`` over ``t = 1 .. N-u-1``
    (the final admissible base index is not used).  ``keep`` optionally
    restricts the base times ``t``; missing values drop their term.
    """
    lead, base, ok = _pair_terms(residuals, g, i, j, u, keep)
    if not ok.any():
        raise DataError("no valid terms for the semivariogram")
    d = lead[ok] - base[ok]
    return float((d @ d) / (2.0 * ok.sum()))


def wind_regime(speeds) -> np.ndarray:
    """True where the space-height averaged raw speed is strong (>= 8 m/s)."""
    s = np.asarray(speeds, dtype=float)
    avg = np.nanmean(s.reshape(s.shape[0], -1), axis=1)
    return avg >= STRONG_WIND_MPS


@dataclass(frozen=True)
class AsymmetryEstimate:
    height: int
    i: int
    j: int
    lag: int
    regime: str
    value: float


def asymmetry(residuals, g, i, j, u, regime: str | None = None, speeds=None) -> AsymmetryEstimate:
    """``a(i, j, u) = delta(s_i, s_j, u) - delta(s_j, s_i, u)``.

    ``regime`` in {"weak", "strong"} restricts base times by the averaged
    raw ``speeds``; ``None`` uses all times.
    """
    keep = None
    if regime is not None:
        if speeds is None:
            raise ValueError("regime filtering needs raw speeds")
        strong = wind_regime(speeds)
        keep = strong if regime == "strong" else ~strong
        if not keep[: max(len(keep) - u - 1, 0)].any():
            raise DataError(f"empty {regime} regime subset")
    val = semivariogram(residuals, g, i, j, u, keep) - semivariogram(residuals, g, j, i, u, keep)
    return AsymmetryEstimate(g, i, j, u, regime or "all", val)


def asymmetry_table(residuals, lags, speeds=None, regimes=("weak", "strong")):
    """All ordered site pairs ``i < j`` at every height, lag and regime."""
    r = np.asarray(residuals, dtype=float)
    _, m, G = r.shape
    rows = []
    for regime in regimes:
        for g in range(G):
            for i in range(m):
                for j in range(i + 1, m):
                    for u in lags:
                        try:
                            rows.append(asymmetry(r, g, i, j, u, regime, speeds))
                        except DataError:
                            continue
    return rows
