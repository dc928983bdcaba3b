"""Multi-height advection-driven state-space wind forecasting."""

__version__ = "0.1.0"

from .domain import GaussianBelief, HeightLevels, ObservationPanel, Site, SiteSet  # noqa: E402
from .estimator import DeepMIDE, ForecastResult  # noqa: E402
from .evaluate import MetricTable, RollingProtocol, run_protocol  # noqa: E402
from .exceptions import (ConfigurationError, DataError, DeepMIDEError, NotFittedError,  # noqa: E402
                         NumericalError)
from .extractor import ExtractorConfig, PhysicsExtractor  # noqa: E402
from .maps import WeatherMapStream  # noqa: E402
from .simulate import SimulationConfig, simulate_process  # noqa: E402
from .train import FittedModel, ModelConfig, TrainingConfig, offline_fit, online_update  # noqa: E402

__all__ = [
    "ConfigurationError", "DataError", "DeepMIDE", "DeepMIDEError", "ExtractorConfig",
    "FittedModel", "ForecastResult", "GaussianBelief", "HeightLevels", "MetricTable",
    "ModelConfig", "NotFittedError", "NumericalError", "ObservationPanel", "PhysicsExtractor",
    "RollingProtocol", "SimulationConfig", "Site", "SiteSet", "TrainingConfig",
    "WeatherMapStream", "offline_fit", "online_update", "run_protocol", "simulate_process",
]
