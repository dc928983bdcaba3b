"""Synthetic multi-height advected wind fields with known ground truth.

The forward model is the discretized IDE itself: ``Y_t = K_t Y_{t-1} +
eta_t`` on the site grid, observed as ``Z_t = Y_t + eps_t`` in the
transformed, detrended scale.  A diurnal trend and a mean level are added
and the result is mapped to m/s through the inverse Box-Cox transform.

Weather maps carry the advection in two ways: channel 0 is a smooth
scalar field moved by the lowest-height advection (same sign convention
as the kernel, i.e. the value at ``s`` is taken from ``s + theta``),
channels 1 and 2 are noisy fields of the base advection components.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .domain import HeightLevels, ObservationPanel, SiteSet, pairwise_distances
from .exceptions import ConfigurationError, DataError
from .kernel import KernelParams, NoiseCovParams, build_noise_cov, build_propagator, spectral_radius
from .maps import WeatherMapStream
from .preprocess import BoxCoxParam, diurnal_design, epoch_hours, invert_box_cox
from .ssm import safe_cholesky


@dataclass
class SimulationConfig:
    site_ids: list = field(default_factory=lambda: ["S1", "S2", "S3"])
    site_coords: list = field(default_factory=lambda: [[-20.0, -8.0], [4.0, 14.0], [16.0, -6.0]])
    heights: list = field(default_factory=lambda: [100.0, 140.0, 180.0])
    T: int = 2000
    step_seconds: int = 600
    start_epoch: int = 1622505600  # 2021-06-01T00:00:00Z
    burn_in: int = 200
    # true statistical parameters
    ell_same: float = 12.0
    ell_cross: float = 4.0
    sigma_eps: float = 0.12
    ell_eps: float = 8.0
    sigma_eta: float = 0.5
    ell_eta: float = 18.0
    normalize: bool = True
    allow_unstable: bool = False
    # advection schedule (km per step)
    schedule: str = "smooth"  # smooth | constant
    theta_const: list = field(default_factory=lambda: [6.0, 1.5])
    norm_mean: float = 7.0
    norm_diurnal_amp: float = 1.5
    norm_random_sd: float = 2.0
    norm_min: float = 4.0
    norm_max: float = 14.0
    corr_steps: float = 36.0
    direction_deg: float = 14.0  # prevailing direction of theta, degrees from east
    direction_sd_deg: float = 20.0
    height_gains: list = field(default_factory=lambda: [1.0, 1.2, 1.4])
    height_veer_deg: list = field(default_factory=lambda: [0.0, 6.0, 12.0])
    theta_max: Optional[float] = 30.0
    # observation scale
    box_cox_lambda: float = 0.5
    level: float = 3.7
    height_level_step: float = 0.1
    diurnal_amp: float = 0.4
    diurnal_phase_hours: float = 15.0
    # rasters
    raster_width: int = 20
    raster_height: int = 20
    raster_margin_km: float = 40.0
    raster_channels: tuple = ("tracer", "u_proxy", "v_proxy")
    field_scale_km: float = 25.0
    map_noise: float = 0.3
    seed: int = 7

    def __post_init__(self):
        self.raster_channels = tuple(self.raster_channels)
        if len(self.site_ids) != len(self.site_coords):
            raise ConfigurationError("site_ids and site_coords differ in length")
        if len(self.height_gains) != len(self.heights) or len(self.height_veer_deg) != len(self.heights):
            raise ConfigurationError("height_gains / height_veer_deg must have one entry per height")
        if self.T < 2:
            raise ConfigurationError("T must be at least 2")
        KernelParams(self.ell_same, self.ell_cross)
        NoiseCovParams(self.sigma_eps, self.ell_eps, self.sigma_eta, self.ell_eta)

    @property
    def coords(self) -> np.ndarray:
        return np.asarray(self.site_coords, dtype=float).reshape(-1, 2)

    @property
    def resolved_theta_max(self) -> float:
        if self.theta_max is not None:
            return float(self.theta_max)
        return 1.5 * float(pairwise_distances(self.coords).max())

    @property
    def omega(self) -> dict:
        return {k: getattr(self, k) for k in
                ("ell_same", "ell_cross", "sigma_eps", "ell_eps", "sigma_eta", "ell_eta")}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["raster_channels"] = list(self.raster_channels)
        return d


@dataclass
class SyntheticTruth:
    config: SimulationConfig
    times: np.ndarray  # epoch seconds, (T,)
    theta: np.ndarray  # (T, P, 2)
    latent: np.ndarray  # (T, n*P), height-major
    transformed: np.ndarray  # (T, n, P) detrended-scale observations Y + eps
    trend: np.ndarray  # (T, n, P) level + diurnal, transformed scale
    speeds: np.ndarray  # (T, n, P), m/s
    maps: WeatherMapStream

    @property
    def sites(self) -> SiteSet:
        return SiteSet.from_arrays(self.config.site_ids, self.config.coords)

    @property
    def heights(self) -> HeightLevels:
        return HeightLevels(tuple(float(h) for h in self.config.heights))

    def panel(self) -> ObservationPanel:
        mask = np.ones(self.speeds.shape, dtype=bool)
        return ObservationPanel(self.times, self.speeds, mask, self.sites, self.heights)


def _ou(rng, size, corr_steps):
    # unit-variance AR(1) with e-folding time corr_steps
    phi = np.exp(-1.0 / corr_steps)
    x = np.empty(size)
    x[0] = rng.standard_normal()
    e = rng.standard_normal(size) * np.sqrt(1 - phi ** 2)
    for k in range(1, size):
        x[k] = phi * x[k - 1] + e[k]
    return x


def advection_schedule(cfg: SimulationConfig, hours, rng) -> tuple[np.ndarray, np.ndarray]:
    """Base advection ``(T, 2)`` and per-height advection ``(T, P, 2)``."""
    T = hours.size
    if cfg.schedule == "constant":
        base = np.tile(np.asarray(cfg.theta_const, dtype=float), (T, 1))
    elif cfg.schedule == "smooth":
        phase = 2 * np.pi * (hours - cfg.diurnal_phase_hours) / 24.0
        norm = (cfg.norm_mean + cfg.norm_diurnal_amp * np.cos(phase)
                + cfg.norm_random_sd * _ou(rng, T, cfg.corr_steps))
        norm = np.clip(norm, cfg.norm_min, cfg.norm_max)
        ang = np.deg2rad(cfg.direction_deg + cfg.direction_sd_deg * _ou(rng, T, 3 * cfg.corr_steps))
        base = norm[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
    else:
        raise ConfigurationError(f"unknown advection schedule {cfg.schedule!r}")
    thetas = []
    for gain, veer in zip(cfg.height_gains, cfg.height_veer_deg):
        a = np.deg2rad(veer)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        thetas.append(gain * base @ rot.T)
    theta = np.stack(thetas, axis=1)
    tmax = cfg.resolved_theta_max
    if np.abs(theta).max() > tmax:
        raise ConfigurationError(f"advection exceeds theta_max={tmax:g}")
    return base, theta


def raster_geometry(cfg: SimulationConfig):
    xy = cfg.coords
    lo = xy.min(0) - cfg.raster_margin_km
    hi = xy.max(0) + cfg.raster_margin_km
    return [float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])]


def _smooth_periodic_field(rng, ny, nx, Ly, Lx, scale):
    ky = np.fft.fftfreq(ny, d=Ly / ny)
    kx = np.fft.fftfreq(nx, d=Lx / nx)
    k2 = ky[:, None] ** 2 + kx[None, :] ** 2
    spectrum = np.exp(-0.5 * k2 * (2 * np.pi * scale) ** 2 / 4.0)
    noise = np.fft.fft2(rng.standard_normal((ny, nx)))
    f = np.fft.ifft2(noise * spectrum).real
    return f / f.std()


def _shifted(F_hat, ky, kx, dx, dy):
    # f(x + dx, y + dy) on the periodic grid via the Fourier shift theorem
    phase = np.exp(2j * np.pi * (ky[:, None] * dy + kx[None, :] * dx))
    return np.fft.ifft2(F_hat * phase).real


def render_weather_maps(theta_base, theta_lowest, cfg: SimulationConfig, times, rng) -> WeatherMapStream:
    """Three-channel rasters per step; see module docstring."""
    W, H = cfg.raster_width, cfg.raster_height
    bbox = raster_geometry(cfg)
    Lx, Ly = bbox[2] - bbox[0], bbox[3] - bbox[1]
    f0 = _smooth_periodic_field(rng, H, W, Ly, Lx, cfg.field_scale_km)
    F_hat = np.fft.fft2(f0)
    ky = np.fft.fftfreq(H, d=Ly / H)
    kx = np.fft.fftfreq(W, d=Lx / W)
    disp = np.cumsum(theta_lowest, axis=0) - theta_lowest[0]
    T = theta_base.shape[0]
    data = np.empty((T, 3, H, W), dtype=np.float32)
    noise = rng.standard_normal((T, 2, H, W)) * cfg.map_noise
    for t in range(T):
        data[t, 0] = _shifted(F_hat, ky, kx, disp[t, 0], disp[t, 1])
        data[t, 1] = theta_base[t, 0] + noise[t, 0]
        data[t, 2] = theta_base[t, 1] + noise[t, 1]
    return WeatherMapStream(times=np.asarray(times, dtype=np.int64), data=data,
                            channels=list(cfg.raster_channels), bbox=bbox,
                            step_seconds=cfg.step_seconds)


def simulate_process(cfg: SimulationConfig) -> SyntheticTruth:
    rng = np.random.default_rng(cfg.seed)
    coords = cfg.coords
    n, P = coords.shape[0], len(cfg.heights)
    N = n * P
    B, T = cfg.burn_in, cfg.T
    times_all = cfg.start_epoch + cfg.step_seconds * np.arange(-B, T, dtype=np.int64)
    hours = epoch_hours(times_all)
    base, theta = advection_schedule(cfg, hours, rng)

    kp = KernelParams(cfg.ell_same, cfg.ell_cross)
    ncp = NoiseCovParams(cfg.sigma_eps, cfg.ell_eps, cfg.sigma_eta, cfg.ell_eta)
    Le = safe_cholesky(build_noise_cov("epsilon", ncp, coords, P))
    Ln = safe_cholesky(build_noise_cov("eta", ncp, coords, P))

    Y = np.zeros((B + T, N))
    eta = rng.standard_normal((B + T, N)) @ Ln.T
    eps = rng.standard_normal((B + T, N)) @ Le.T
    Y[0] = eta[0]
    for k in range(1, B + T):
        K = build_propagator(k - 1, theta[k], coords, kp, normalize=cfg.normalize)
        if not cfg.normalize and not cfg.allow_unstable and spectral_radius(K) > 1.0 + 1e-10:
            raise ConfigurationError(f"unstable propagator at step {k}; enable normalize or allow_unstable")
        Y[k] = K @ Y[k - 1] + eta[k]
    Zt = Y + eps

    def to_panel(a):
        return a.reshape(-1, P, n).transpose(0, 2, 1)

    D = diurnal_design(hours)
    amp = cfg.diurnal_amp
    ph = 2 * np.pi * cfg.diurnal_phase_hours / 24.0
    diurnal = amp * (D[:, 1] * np.sin(ph) + D[:, 2] * np.cos(ph))
    levels = cfg.level + cfg.height_level_step * np.arange(P)
    trend = levels[None, None, :] + diurnal[:, None, None] + np.zeros((1, n, 1))
    transformed = to_panel(Zt)
    speeds = invert_box_cox(transformed + trend, BoxCoxParam(cfg.box_cox_lambda), clip=True)
    speeds = np.maximum(speeds, 0.0)

    sl = slice(B, B + T)
    maps = render_weather_maps(base[sl], theta[sl, 0], cfg, times_all[sl], rng)
    return SyntheticTruth(cfg, times_all[sl], theta[sl], Y[sl], transformed[sl], trend[sl], speeds[sl], maps)


# --------------------------------------------------------------------------
# fixture files
# --------------------------------------------------------------------------

REFERENCE_LATLON = (39.5, -73.5)


def write_fixture(truth: SyntheticTruth, path, lat0: float = REFERENCE_LATLON[0],
                  lon0: float = REFERENCE_LATLON[1]) -> dict:
    """Write ``obs.csv``, ``sites.csv``, ``maps/`` and ``truth.json`` under
    ``path``; returns the sha256 digest of each written file."""
    from .io import write_observations, write_sites

    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        write_observations(path / "obs.csv", truth.panel())
        write_sites(path / "sites.csv", truth.sites, lat0, lon0)
        truth.maps.write(path / "maps")
        meta = {
            "seed": truth.config.seed,
            "reference_latlon": [lat0, lon0],
            "omega_true": truth.config.omega,
            "times": truth.times.tolist(),
            "theta_true": truth.theta.tolist(),
            "config": truth.config.to_dict(),
        }
        (path / "truth.json").write_text(json.dumps(meta) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write fixture under {path}: {exc}") from exc
    return fixture_digest(path)


def fixture_digest(path) -> dict:
    path = Path(path)
    files = sorted(p for p in path.rglob("*") if p.is_file())
    return {str(p.relative_to(path)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


@dataclass
class FixtureData:
    panel: ObservationPanel
    maps: WeatherMapStream
    theta: np.ndarray
    omega: dict
    config: SimulationConfig


def read_fixture(path) -> FixtureData:
    from .io import read_observations, read_sites

    path = Path(path)
    try:
        meta = json.loads((path / "truth.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path / 'truth.json'}: {exc}") from exc
    sites = read_sites(path / "sites.csv")
    panel = read_observations(path / "obs.csv", sites)
    maps = WeatherMapStream.read(path / "maps")
    cfg = SimulationConfig(**meta["config"])
    return FixtureData(panel, maps, np.array(meta["theta_true"], dtype=float), meta["omega_true"], cfg)
