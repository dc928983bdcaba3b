"""Estimator front end: fit, online update and probabilistic forecasts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .domain import GaussianBelief, ObservationPanel
from .exceptions import DataError
from .extractor import ExtractorConfig
from .kernel import build_propagator
from .maps import WeatherMapStream
from .preprocess import invert_box_cox
from .ssm import ForecastDistribution, forecast, initial_belief, run_filter
from .train import (FittedModel, ModelConfig, TrainingConfig, offline_fit, online_update,
                    predict_thetas, prepare, unstack_latent)
from .validation import check_fitted


@dataclass
class ForecastResult:
    """Forecasts issued at ``issue_time`` for ``horizon`` steps.

    Arrays are ``(H, m, G)`` in panel order.  ``mean`` and ``lo``/``hi``
    are in the transformed (Box-Cox) scale including the diurnal trend;
    the ``*_mps`` arrays are their inverse transforms.
    """

    issue_time: int
    times: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    mean_mps: np.ndarray
    lo_mps: np.ndarray
    hi_mps: np.ndarray
    theta: np.ndarray  # (H, P, 2)
    distribution: ForecastDistribution
    propagators: list


def filter_history(model: FittedModel, panel: ObservationPanel, maps: WeatherMapStream):
    """Filtered belief at the last step of ``panel`` and the number of
    transitions run (the window-relative time of the next step)."""
    if len(panel) == 0:
        raise DataError("forecasting needs at least one observed step")
    data = prepare(model, panel, maps)
    kp = model.kernel_params()
    Q, R = model.covariances()
    coords = model.sites.coords
    b0 = initial_belief(data.Z[0][data.idxs[0]], data.idxs[0], model.n_latent, model.init_var)
    if len(panel) == 1:
        return b0, 0
    theta = predict_thetas(model.extractor, maps, data.map_index[1:])
    Ks = [build_propagator(k, theta[k], coords, kp, model.normalize) for k in range(len(panel) - 1)]
    obs = [(data.Z[k][data.idxs[k]], data.idxs[k]) for k in range(1, len(panel))]
    state = run_filter(b0, Ks, Q, obs, R)
    return state.belief, len(panel) - 1


def forecast_panel(model: FittedModel, panel: ObservationPanel, maps: WeatherMapStream,
                   horizon: int, level: float = 0.95) -> ForecastResult:
    """Filter through ``panel`` and forecast ``horizon`` steps past its end.

    Weather maps must cover every forecast step.
    """
    if horizon < 1:
        raise DataError("horizon must be >= 1")
    belief, t0 = filter_history(model, panel, maps)
    return forecast_from_belief(model, belief, t0, int(panel.times[-1]), maps, horizon, level)


def forecast_from_belief(model: FittedModel, belief: GaussianBelief, t0: int, issue_time: int,
                         maps: WeatherMapStream, horizon: int, level: float = 0.95) -> ForecastResult:
    step = model.step_seconds
    times = issue_time + step * np.arange(1, horizon + 1, dtype=np.int64)
    theta = predict_thetas(model.extractor, maps, maps.align(times))
    kp = model.kernel_params()
    coords = model.sites.coords
    Ks = [build_propagator(t0 + h, theta[h], coords, kp, model.normalize) for h in range(horizon)]
    Q, R = model.covariances()
    dist = forecast(belief, Ks, Q, R)
    m, G = len(model.sites), len(model.heights)
    trend = model.detrender().trend(times)
    mean = unstack_latent(dist.obs_mean, m, G) + trend
    sd = unstack_latent(np.sqrt(np.clip(np.diagonal(dist.obs_cov, axis1=1, axis2=2), 0, None)), m, G)
    lo_r, hi_r = dist.interval(level)
    lo = unstack_latent(lo_r, m, G) + trend
    hi = unstack_latent(hi_r, m, G) + trend
    inv = lambda a: np.maximum(invert_box_cox(a, model.box_cox, clip=True), 0.0)  # noqa: E731
    return ForecastResult(issue_time, times, mean, sd, lo, hi, inv(mean), inv(lo), inv(hi),
                          theta, dist, Ks)


class DeepMIDE(BaseEstimator):
    """Advection-driven multi-height state-space wind forecaster.

    Parameters
    ----------
    model_config : ModelConfig, optional
        Initial kernel/noise parameters, advection bound and Box-Cox setting.
    extractor_config : ExtractorConfig, optional
        Architecture of the raster-to-advection network.
    training_config : TrainingConfig, optional
        Optimizer and online-update settings.
    history : int
        Number of past steps filtered before a forecast is issued.

    Examples
    --------
    >>> est = DeepMIDE().fit(panel, maps)               # doctest: +SKIP
    >>> fc = est.forecast(panel.slice(-288, None), maps, horizon=144)  # doctest: +SKIP
    """

    def __init__(self, model_config=None, extractor_config=None, training_config=None, history=1008):
        self.model_config = model_config
        self.extractor_config = extractor_config
        self.training_config = training_config
        self.history = history

    def _configs(self):
        return (self.model_config or ModelConfig(), self.extractor_config or ExtractorConfig(),
                self.training_config or TrainingConfig())

    def fit(self, panel: ObservationPanel, maps: WeatherMapStream, theta=None, callback=None):
        mc, ec, tc = self._configs()
        self.model_ = offline_fit(panel, maps, mc, ec, tc, theta=theta, callback=callback)
        return self

    @classmethod
    def from_model(cls, model: FittedModel, **kwargs) -> "DeepMIDE":
        est = cls(**kwargs)
        est.model_ = model
        return est

    def partial_fit(self, panel: ObservationPanel, maps: WeatherMapStream):
        """Online update of the statistical parameters on a recent window."""
        check_fitted(self, "model_")
        tc = self._configs()[2]
        self.model_ = online_update(self.model_, panel, maps, tc)
        return self

    def forecast(self, panel: ObservationPanel, maps: WeatherMapStream, horizon: int,
                 level: float = 0.95) -> ForecastResult:
        check_fitted(self, "model_")
        start = max(len(panel) - self.history, 0)
        return forecast_panel(self.model_, panel.slice(start, len(panel)), maps, horizon, level)

    def predict(self, panel: ObservationPanel, maps: WeatherMapStream, horizon: int) -> np.ndarray:
        """Point forecasts in m/s, shape ``(horizon, m, G)``."""
        return self.forecast(panel, maps, horizon).mean_mps

    def advection(self, maps: WeatherMapStream, times) -> np.ndarray:
        """Predicted advection ``(len(times), P, 2)``."""
        check_fitted(self, "model_")
        return predict_thetas(self.model_.extractor, maps, maps.align(times))
