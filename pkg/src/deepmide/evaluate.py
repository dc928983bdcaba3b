"""Rolling-origin evaluation, benchmark forecasters, metrics and power conversion."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .domain import ObservationPanel
from .exceptions import DataError
from .maps import WeatherMapStream, iso
from .preprocess import BoxCoxParam, epoch_hours, fit_diurnal_series, invert_box_cox
from .train import FittedModel, TrainingConfig, online_update, transform_panel

# --------------------------------------------------------------------------
# benchmark forecasters
# --------------------------------------------------------------------------


def last_observed(values, mask, t: int) -> np.ndarray:
    """Most recent observed value at or before ``t`` per series (NaN if none)."""
    v = np.where(mask[: t + 1], values[: t + 1], np.nan)
    out = np.full(v.shape[1:], np.nan)
    for k in range(v.shape[0] - 1, -1, -1):
        fill = np.isnan(out) & np.isfinite(v[k])
        out[fill] = v[k][fill]
        if not np.isnan(out).any():
            break
    return out


def persistence_forecast(panel: ObservationPanel, t: int, h: int) -> np.ndarray:
    """``(h, m, G)`` forecasts equal to the value at ``t`` (carried forward
    from the last observation when ``t`` is missing)."""
    last = last_observed(panel.values, panel.mask, t)
    return np.repeat(last[None], h, axis=0)


@dataclass
class ARFit:
    order: int
    intercept: float
    coef: np.ndarray
    sigma2: float
    aic: float
    constant: bool = False

    def forecast(self, history, h: int) -> np.ndarray:
        hist = list(np.asarray(history, dtype=float))
        if self.constant or self.order == 0:
            return np.full(h, hist[-1] if self.constant else self.intercept)
        out = []
        for _ in range(h):
            lags = hist[-1: -self.order - 1: -1]
            nxt = self.intercept + float(np.dot(self.coef, lags))
            out.append(nxt)
            hist.append(nxt)
        return np.array(out)


def fit_ar(y, max_order: int = 6) -> ARFit:
    """Least-squares AR(p) with intercept, ``p <= max_order`` chosen by AIC
    on a common estimation sample.  Missing values are linearly filled."""
    y = np.asarray(y, dtype=float)
    ok = np.isfinite(y)
    if ok.sum() < 10 * max(max_order, 1):
        raise DataError(f"AR fit needs at least {10 * max(max_order, 1)} observations")
    if not ok.all():
        idx = np.arange(y.size)
        y = np.interp(idx, idx[ok], y[ok])
    if np.ptp(y) == 0:
        return ARFit(0, float(y[-1]), np.zeros(0), 0.0, -np.inf, constant=True)
    n = y.size - max_order
    target = y[max_order:]
    best = None
    for p in range(0, max_order + 1):
        X = np.column_stack([np.ones(n)] + [y[max_order - k: y.size - k] for k in range(1, p + 1)])
        beta, *_ = np.linalg.lstsq(X, target, rcond=None)
        resid = target - X @ beta
        s2 = float(resid @ resid) / n
        if s2 <= 0:
            s2 = np.finfo(float).tiny
        aic = n * math.log(s2) + 2 * (p + 1)
        if best is None or aic < best.aic - 1e-12:
            best = ARFit(p, float(beta[0]), beta[1:].copy(), s2, aic)
    return best


class ARForecaster:
    """Per-series AR(p) on the Box-Cox transformed, diurnally detrended
    series; forecasts are re-trended and back-transformed to m/s."""

    def __init__(self, max_order: int = 6, box_cox: BoxCoxParam | None = None):
        self.max_order = max_order
        self.box_cox = box_cox

    def forecast(self, panel: ObservationPanel, h: int, box_cox: BoxCoxParam | None = None):
        """Forecast ``h`` steps past the end of ``panel``; returns
        ``(mps, transformed)`` arrays of shape ``(h, m, G)``."""
        bc = box_cox or self.box_cox or BoxCoxParam(1.0)
        W = transform_panel(panel, bc)
        hours = epoch_hours(panel.times)
        fut = epoch_hours(panel.times[-1] + panel.step_seconds * np.arange(1, h + 1))
        _, m, G = W.shape
        out = np.empty((h, m, G))
        for i in range(m):
            for g in range(G):
                y = W[:, i, g]
                try:
                    d = fit_diurnal_series(hours, y)
                    resid, trend = d.residuals, d.trend(fut)
                except DataError:
                    resid, trend = y - np.nanmean(y), np.full(h, np.nanmean(y))
                try:
                    fit = fit_ar(resid, self.max_order)
                    ok = np.isfinite(resid)
                    hist = np.interp(np.arange(resid.size), np.flatnonzero(ok), resid[ok])
                    out[:, i, g] = fit.forecast(hist, h) + trend
                except DataError:
                    out[:, i, g] = persistence_forecast_transformed(W, h)[:, i, g]
        return np.maximum(invert_box_cox(out, bc, clip=True), 0.0), out


def persistence_forecast_transformed(W, h):
    mask = np.isfinite(W)
    last = last_observed(W, mask, W.shape[0] - 1)
    return np.repeat(last[None], h, axis=0)


def ar_forecast(panel: ObservationPanel, t: int, h: int, max_order: int = 6,
                box_cox: BoxCoxParam | None = None) -> np.ndarray:
    """AR benchmark issued at step ``t`` using data up to ``t``; m/s."""
    return ARForecaster(max_order, box_cox).forecast(panel.slice(0, t + 1), h)[0]


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _abs_err(forecasts, actuals):
    f = np.asarray(forecasts, dtype=float)
    a = np.asarray(actuals, dtype=float)
    if f.shape != a.shape:
        raise DataError(f"forecast shape {f.shape} != actual shape {a.shape}")
    return np.abs(f - a)


def mae_by_height(forecasts, actuals, g: int, h: int):
    """MAE at height ``g`` and horizon index ``h`` over rolls and sites.

    Arrays are ``(R, H, m, G)``; entries with missing actuals are dropped.
    Returns ``None`` when no valid pair exists.
    """
    e = _abs_err(forecasts, actuals)[:, h, :, g]
    e = e[np.isfinite(e)]
    return float(e.mean()) if e.size else None


def mae_by_site(forecasts, actuals, s: int, h: int):
    """MAE at site ``s`` and horizon index ``h`` over rolls and heights."""
    e = _abs_err(forecasts, actuals)[:, h, s, :]
    e = e[np.isfinite(e)]
    return float(e.mean()) if e.size else None


def improvement(mae_star, mae_bench):
    """Percentage reduction of ``mae_star`` relative to ``mae_bench``."""
    if mae_star is None or mae_bench is None or mae_bench == 0:
        return None
    return 100.0 * (1.0 - mae_star / mae_bench)


def wind_shear(z_hi, z_lo, h_hi, h_lo) -> float:
    """Power-law shear exponent between two heights."""
    vals = np.array([z_hi, z_lo, h_hi, h_lo], dtype=float)
    if np.any(vals <= 0) or not np.all(np.isfinite(vals)):
        raise DataError("wind shear needs positive speeds and heights")
    if h_hi == h_lo:
        raise DataError("wind shear needs two distinct heights")
    return float(np.log(z_hi / z_lo) / np.log(h_hi / h_lo))


# --------------------------------------------------------------------------
# power curve
# --------------------------------------------------------------------------

@dataclass
class PowerCurve:
    """``power = 100 * logistic((v - (a + b * S_a)) / width)``, clipped to [0, 100]."""

    a: float
    b: float
    width: float

    def __call__(self, speed, shear) -> np.ndarray:
        v = np.asarray(speed, dtype=float)
        z = (v - (self.a + self.b * np.asarray(shear, dtype=float))) / self.width
        return np.clip(100.0 / (1.0 + np.exp(-np.clip(z, -700, 700))), 0.0, 100.0)


def fit_power_curve(speed, shear, power, cut_in: float = 3.0, rated: float = 11.0) -> PowerCurve:
    speed, shear, power = (np.asarray(x, dtype=float) for x in (speed, shear, power))
    if speed.size < 50:
        raise DataError("power-curve fit needs at least 50 rows")
    if speed.min() > cut_in or speed.max() < rated:
        warnings.warn("power-curve training speeds do not span cut-in to rated", RuntimeWarning, stacklevel=2)

    def resid(p):
        return PowerCurve(p[0], p[1], np.exp(p[2]))(speed, shear) - power

    x0 = np.array([float(np.median(speed)), 0.0, 0.0])
    sol = least_squares(resid, x0, method="lm")
    return PowerCurve(float(sol.x[0]), float(sol.x[1]), float(np.exp(sol.x[2])))


def read_power_csv(path):
    with Path(path).open(newline="") as f:
        rows = list(csv.DictReader(f))
    try:
        return tuple(np.array([float(r[k]) for r in rows]) for k in ("hub_speed_mps", "shear_above", "power"))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: expected columns hub_speed_mps,shear_above,power ({exc})") from exc


def synthetic_power_data(n: int = 400, seed: int = 0, truth: PowerCurve = PowerCurve(7.0, 3.0, 0.9),
                         noise_sd: float = 1.5):
    """Speeds, above-hub shear and noisy power from a known logistic curve."""
    rng = np.random.default_rng(seed)
    v = rng.uniform(0.0, 18.0, n)
    s = rng.uniform(0.0, 0.4, n)
    p = np.clip(truth(v, s) + rng.normal(0.0, noise_sd, n), 0.0, 100.0)
    return v, s, p


def speed_to_power(curve: PowerCurve, hub_mean, upper_mean, h_hub: float, h_upper: float,
                   transformed=None, box_cox: BoxCoxParam | None = None, n_draws: int = 0, seed: int = 0):
    """Power forecast from hub- and upper-height speed forecasts.

    With ``n_draws > 0``, ``transformed = (mean_hub, sd_hub, mean_up, sd_up)``
    in the transformed scale gives a Monte Carlo mean over Gaussian draws.
    """
    hub_mean = np.asarray(hub_mean, dtype=float)
    upper_mean = np.asarray(upper_mean, dtype=float)
    eps = 1e-6
    shear = np.log(np.maximum(upper_mean, eps) / np.maximum(hub_mean, eps)) / np.log(h_upper / h_hub)
    point = curve(hub_mean, shear)
    if n_draws <= 0:
        return point
    if transformed is None or box_cox is None:
        raise DataError("Monte Carlo power needs transformed-scale moments and the Box-Cox power")
    mh, sh, mu, su = (np.asarray(x, dtype=float) for x in transformed)
    rng = np.random.default_rng(seed)
    dh = invert_box_cox(mh + sh * rng.standard_normal((n_draws,) + mh.shape), box_cox, clip=True)
    du = invert_box_cox(mu + su * rng.standard_normal((n_draws,) + mu.shape), box_cox, clip=True)
    dh, du = np.maximum(dh, eps), np.maximum(du, eps)
    return curve(dh, np.log(du / dh) / np.log(h_upper / h_hub)).mean(axis=0)


# --------------------------------------------------------------------------
# protocol
# --------------------------------------------------------------------------

@dataclass
class RollingProtocol:
    horizon: int = 144
    stride: int = 144
    offline_fraction: float = 0.7
    history: int = 1008
    online_update: bool = True
    ar_max_order: int = 6

    def __post_init__(self):
        if self.horizon < 1 or self.stride < 1 or self.history < 1:
            raise DataError("protocol horizon, stride and history must be >= 1")
        if not 0 < self.offline_fraction < 1:
            raise DataError("protocol offline_fraction must lie in (0, 1)")

    def split(self, T: int) -> int:
        return int(math.floor(self.offline_fraction * T))

    def n_rolls(self, T_online: int) -> int:
        if T_online < self.horizon:
            return 0
        return (T_online - self.horizon) // self.stride + 1

    def origins(self, T: int) -> np.ndarray:
        """Issue indices (last observed step) for each roll."""
        T_off = self.split(T)
        return T_off - 1 + self.stride * np.arange(self.n_rolls(T - T_off))

    def instance_count(self, n_rolls: int, n_sites: int, n_heights: int) -> int:
        return n_rolls * self.horizon * n_sites * n_heights


@dataclass
class MetricTable:
    """Stacked roll results.  Arrays are ``(R, H, m, G)``."""

    methods: list
    issue_times: np.ndarray
    site_ids: list
    heights: list
    step_seconds: int
    actual_mps: np.ndarray
    actual_tr: np.ndarray
    forecast_mps: dict
    forecast_tr: dict
    lo_tr: np.ndarray | None = None
    hi_tr: np.ndarray | None = None
    lo_mps: np.ndarray | None = None
    hi_mps: np.ndarray | None = None
    advection: np.ndarray | None = None  # (R, H, P, 2)
    omega: list = field(default_factory=list)

    @property
    def n_rolls(self) -> int:
        return int(self.actual_mps.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.actual_mps.shape[1])

    @property
    def instances(self) -> int:
        return int(np.prod(self.actual_mps.shape))

    def _pair(self, method, scale):
        if scale == "mps":
            return self.forecast_mps[method], self.actual_mps
        return self.forecast_tr[method], self.actual_tr

    def mae_height(self, method, scale="mps") -> np.ndarray:
        f, a = self._pair(method, scale)
        return np.array([[mae_by_height(f, a, g, h) for h in range(self.horizon)]
                         for g in range(len(self.heights))], dtype=float)

    def mae_site(self, method, scale="mps") -> np.ndarray:
        f, a = self._pair(method, scale)
        return np.array([[mae_by_site(f, a, s, h) for h in range(self.horizon)]
                         for s in range(len(self.site_ids))], dtype=float)

    def mae_horizon(self, method, scale="mps") -> np.ndarray:
        """MAE per horizon pooled over rolls, sites and heights."""
        f, a = self._pair(method, scale)
        e = _abs_err(f, a)
        return np.nanmean(e.reshape(e.shape[0], e.shape[1], -1).transpose(1, 0, 2).reshape(e.shape[1], -1), axis=1)

    def improvement_over(self, method, bench, scale="mps", h_from: int = 1, h_to: int | None = None):
        """IMP of ``method`` over ``bench`` on the MAE averaged over
        horizons ``h_from..h_to`` (1-based steps)."""
        h_to = self.horizon if h_to is None else h_to
        sl = slice(h_from - 1, h_to)
        return improvement(float(self.mae_horizon(method, scale)[sl].mean()),
                           float(self.mae_horizon(bench, scale)[sl].mean()))

    def coverage(self) -> float | None:
        if self.lo_tr is None:
            return None
        a = self.actual_tr
        ok = np.isfinite(a)
        hit = (a >= self.lo_tr) & (a <= self.hi_tr)
        return float(hit[ok].mean()) if ok.any() else None

    # -- output -------------------------------------------------------------

    def write(self, out_dir, plots: bool = True, dump_advection: bool = False) -> list:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []

        def table(name, header, rows):
            p = out / name
            with p.open("w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(header)
                w.writerows(rows)
            written.append(p)

        fmt = lambda x: "" if x is None or not np.isfinite(x) else repr(float(x))  # noqa: E731
        rows = []
        for meth in self.methods:
            for scale in ("mps", "transformed"):
                M = self.mae_height(meth, scale)
                for g, hgt in enumerate(self.heights):
                    rows += [[meth, scale, f"{hgt:g}", h + 1, fmt(M[g, h])] for h in range(self.horizon)]
        table("mae_by_height.csv", ["method", "scale", "height_m", "horizon_steps", "mae"], rows)
        rows = []
        for meth in self.methods:
            for scale in ("mps", "transformed"):
                M = self.mae_site(meth, scale)
                for s, sid in enumerate(self.site_ids):
                    rows += [[meth, scale, sid, h + 1, fmt(M[s, h])] for h in range(self.horizon)]
        table("mae_by_site.csv", ["method", "scale", "site_id", "horizon_steps", "mae"], rows)
        rows = []
        for meth in self.methods:
            for bench in self.methods:
                if meth == bench:
                    continue
                for scale in ("mps", "transformed"):
                    a, b = self.mae_horizon(meth, scale), self.mae_horizon(bench, scale)
                    rows += [[meth, bench, scale, h + 1, fmt(improvement(a[h], b[h]))] for h in range(self.horizon)]
        table("improvement.csv", ["method", "benchmark", "scale", "horizon_steps", "imp_pct"], rows)
        summary = [["n_rolls", self.n_rolls], ["horizon_steps", self.horizon],
                   ["instances", self.instances], ["coverage95", fmt(self.coverage())]]
        for meth in self.methods:
            for scale in ("mps", "transformed"):
                summary.append([f"mae_{meth}_{scale}", fmt(float(np.nanmean(self.mae_horizon(meth, scale))))])
        if "DeepMIDE" in self.methods:
            for bench in self.methods:
                if bench != "DeepMIDE":
                    for scale in ("mps", "transformed"):
                        summary.append([f"imp_DeepMIDE_vs_{bench}_{scale}_h6plus",
                                        fmt(self.improvement_over("DeepMIDE", bench, scale, 6))])
        table("summary.csv", ["metric", "value"], summary)
        rows = []
        for r, t0 in enumerate(self.issue_times):
            for h in range(self.horizon):
                for s, sid in enumerate(self.site_ids):
                    for g, hgt in enumerate(self.heights):
                        row = [iso(t0), h + 1, sid, f"{hgt:g}", fmt(self.actual_mps[r, h, s, g])]
                        row += [fmt(self.forecast_mps[m][r, h, s, g]) for m in self.methods]
                        rows.append(row)
        table("forecasts.csv", ["issue_time", "horizon_steps", "site_id", "height_m", "actual_mps"]
              + [f"{m}_mps" for m in self.methods], rows)
        if dump_advection and self.advection is not None:
            rows = []
            for r, t0 in enumerate(self.issue_times):
                for h in range(self.horizon):
                    t = int(t0) + (h + 1) * self.step_seconds
                    for g, hgt in enumerate(self.heights):
                        th = self.advection[r, h, g]
                        rows.append([iso(t), f"{hgt:g}", fmt(th[0]), fmt(th[1]), fmt(float(np.hypot(*th)))])
            table("advection.csv", ["time", "height_m", "theta_x_km", "theta_y_km", "norm_km"], rows)
        if plots:
            written += self.plot(out, dump_advection)
        return written

    def plot(self, out: Path, advection: bool = False) -> list:
        from .plotting import line_plot

        hours = np.arange(1, self.horizon + 1) * self.step_seconds / 3600.0
        files = []
        for g, hgt in enumerate(self.heights):
            series = {m: self.mae_height(m)[g] for m in self.methods}
            files.append(line_plot(out / f"mae_height_{hgt:g}m.svg", hours, series,
                                   "lead time (h)", "MAE (m/s)", f"MAE at {hgt:g} m"))
        for s, sid in enumerate(self.site_ids):
            series = {m: self.mae_site(m)[s] for m in self.methods}
            files.append(line_plot(out / f"mae_site_{sid}.svg", hours, series,
                                   "lead time (h)", "MAE (m/s)", f"MAE at {sid}"))
        if advection and self.advection is not None:
            norms = np.hypot(self.advection[..., 0], self.advection[..., 1]).reshape(-1, len(self.heights))
            steps = np.arange(norms.shape[0])
            series = {f"{h:g} m": norms[:, g] for g, h in enumerate(self.heights)}
            files.append(line_plot(out / "advection_norm.svg", steps, series,
                                   "forecast step (concatenated rolls)", "|theta| (km/step)", "Advection norm"))
        return files


def run_protocol(model: FittedModel | None, panel: ObservationPanel, maps: WeatherMapStream | None,
                 protocol: RollingProtocol, training: TrainingConfig | None = None,
                 benchmarks=("PER", "AR"), box_cox: BoxCoxParam | None = None) -> MetricTable:
    """Evaluate DeepMIDE (when ``model`` is given) and benchmarks on rolling origins.

    Each roll starts from the offline model: Omega is re-estimated on the
    ``history`` steps before the origin, then the full horizon is forecast.
    Rolls are therefore independent of each other.
    """
    from .estimator import forecast_panel

    T = len(panel)
    origins = protocol.origins(T)
    if origins.size == 0:
        raise DataError(f"panel of {T} steps leaves no complete roll")
    H = protocol.horizon
    bc = box_cox or (model.box_cox if model is not None else BoxCoxParam(1.0))
    methods = (["DeepMIDE"] if model is not None else []) + list(benchmarks)
    act_mps = np.stack([panel.values[o + 1:o + 1 + H] for o in origins])
    act_tr = np.stack([transform_panel(panel.slice(o + 1, o + 1 + H), bc) for o in origins])
    f_mps = {m: np.empty_like(act_mps) for m in methods}
    f_tr = {m: np.empty_like(act_mps) for m in methods}
    shape = act_mps.shape
    lo_tr, hi_tr, lo_mps, hi_mps = (np.empty(shape) for _ in range(4)) if model is not None else (None,) * 4
    adv = np.empty((len(origins), H, len(panel.heights), 2)) if model is not None else None
    omegas = []
    ar = ARForecaster(protocol.ar_max_order, bc)
    for r, o in enumerate(origins):
        start = max(o + 1 - protocol.history, 0)
        window = panel.slice(start, o + 1)
        if model is not None:
            m = model
            if protocol.online_update:
                m = online_update(model, window, maps, training)
            omegas.append(m.omega)
            fc = forecast_panel(m, window, maps, H)
            f_mps["DeepMIDE"][r], f_tr["DeepMIDE"][r] = fc.mean_mps, fc.mean
            lo_tr[r], hi_tr[r], lo_mps[r], hi_mps[r] = fc.lo, fc.hi, fc.lo_mps, fc.hi_mps
            adv[r] = fc.theta
        if "PER" in methods:
            f_mps["PER"][r] = persistence_forecast(panel, o, H)
            f_tr["PER"][r] = persistence_forecast_transformed(transform_panel(window, bc), H)
        if "AR" in methods:
            f_mps["AR"][r], f_tr["AR"][r] = ar.forecast(window, H, bc)
    return MetricTable(methods, panel.times[origins], panel.sites.ids, list(panel.heights.heights),
                       panel.step_seconds, act_mps, act_tr, f_mps, f_tr, lo_tr, hi_tr, lo_mps, hi_mps,
                       adv, omegas)
