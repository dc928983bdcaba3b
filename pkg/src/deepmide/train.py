"""Joint likelihood training of the extractor and the statistical parameters.

The statistical parameters ``omega = (ell_same, ell_cross, sigma_eps,
ell_eps, sigma_eta, ell_eta)`` are optimized through an unconstrained
vector ``w`` with ``omega = softplus(w)``.  The loss is the innovation-form
negative log-likelihood per scored observation, evaluated on short
subsequences with the filter restarted at the start of each.
"""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .domain import HeightLevels, ObservationPanel, SiteSet
from .exceptions import ConfigurationError, DataError, NumericalError
from .extractor import ExtractorConfig, NetworkParams, PhysicsExtractor, stream_windows
from .kernel import (KernelParams, NoiseCovParams, build_noise_cov, build_propagator,
                     noise_cov_vjp, propagator_vjp)
from .likelihood import filter_nll
from .maps import WeatherMapStream
from .preprocess import (BoxCoxParam, DiurnalDetrender, apply_box_cox, fit_box_cox)
from .ssm import initial_belief

log = logging.getLogger(__name__)

OMEGA_KEYS = ("ell_same", "ell_cross", "sigma_eps", "ell_eps", "sigma_eta", "ell_eta")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


@dataclass
class ModelConfig:
    """Statistical model settings and initial values of ``omega``."""

    theta_max: float = 30.0
    normalize: bool = True
    ell_same: float = 20.0
    ell_cross: float = 5.0
    sigma_eps: float = 0.2
    ell_eps: float = 10.0
    sigma_eta: float = 0.3
    ell_eta: float = 10.0
    box_cox_lambda: float | None = None  # None fits the power on the offline panel
    box_cox_offset: float = 0.0

    def omega0(self) -> np.ndarray:
        om = np.array([getattr(self, k) for k in OMEGA_KEYS], dtype=float)
        if np.any(om <= 0):
            raise ConfigurationError("initial kernel and noise parameters must be positive")
        return om


@dataclass
class TrainingConfig:
    subseq_len: int = 72
    subseq_stride: int = 18
    batch_size: int = 4
    lr_phi: float = 1e-3
    lr_omega: float = 1e-2
    momentum: float = 0.9
    max_epochs: int = 40
    patience: int = 8
    seed: int = 0
    burn: int = 6
    val_fraction: float = 0.1
    lr_decay: float = 0.5
    plateau: int = 3
    clip_norm: float = 10.0
    online_window: int = 1008
    online_iterations: int = 50

    def __post_init__(self):
        for name in ("subseq_len", "subseq_stride", "batch_size", "max_epochs", "patience", "plateau",
                     "online_window", "online_iterations"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"training.{name} must be positive")
        for name in ("lr_phi", "lr_omega", "clip_norm", "lr_decay"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"training.{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("training.momentum must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError("training.val_fraction must lie in (0, 1)")
        if self.subseq_len <= self.burn + 1:
            raise ConfigurationError("training.subseq_len must exceed the burn-in")


@dataclass
class FittedModel:
    sites: SiteSet
    heights: HeightLevels
    step_seconds: int
    w: np.ndarray  # unconstrained omega
    extractor: PhysicsExtractor
    box_cox: BoxCoxParam
    diurnal_coef: np.ndarray  # (m, G, 5)
    init_var: np.ndarray  # (nP,)
    normalize: bool = True
    omega_scale: np.ndarray = field(default_factory=lambda: np.ones(6))
    log: list = field(default_factory=list)

    def omega_array(self) -> np.ndarray:
        return self.omega_scale * softplus(self.w)

    @property
    def omega(self) -> dict:
        return dict(zip(OMEGA_KEYS, (float(v) for v in self.omega_array())))

    def set_omega(self, omega) -> None:
        om = np.array([omega[k] for k in OMEGA_KEYS] if isinstance(omega, dict) else omega, dtype=float)
        self.w = softplus_inv(om / self.omega_scale)

    @property
    def n_latent(self) -> int:
        return len(self.sites) * len(self.heights)

    def kernel_params(self) -> KernelParams:
        om = self.omega
        return KernelParams(om["ell_same"], om["ell_cross"])

    def noise_params(self) -> NoiseCovParams:
        om = self.omega
        return NoiseCovParams(om["sigma_eps"], om["ell_eps"], om["sigma_eta"], om["ell_eta"])

    def covariances(self):
        ncp, P = self.noise_params(), len(self.heights)
        coords = self.sites.coords
        return build_noise_cov("eta", ncp, coords, P), build_noise_cov("epsilon", ncp, coords, P)

    def detrender(self) -> DiurnalDetrender:
        d = DiurnalDetrender()
        d.coef_ = self.diurnal_coef
        return d

    def phi_checksum(self) -> str:
        return hashlib.sha256(self.extractor.params.flat.tobytes()).hexdigest()

    def copy(self) -> "FittedModel":
        return copy.deepcopy(self)


# --------------------------------------------------------------------------
# data preparation
# --------------------------------------------------------------------------

@dataclass
class PreparedData:
    times: np.ndarray
    Z: np.ndarray  # (T, nP) transformed, detrended, NaN where missing
    idxs: list  # observed latent indices per step
    map_index: np.ndarray  # (T,) index into the map stream
    maps: WeatherMapStream


def transform_panel(panel: ObservationPanel, box_cox: BoxCoxParam) -> np.ndarray:
    v = np.where(panel.mask, panel.values, 1.0)
    return np.where(panel.mask, apply_box_cox(v, box_cox), np.nan)


def stack_panel(arr) -> np.ndarray:
    """``(T, m, G)`` panel order to ``(T, G*m)`` height-major latent order."""
    arr = np.asarray(arr)
    return arr.transpose(0, 2, 1).reshape(arr.shape[0], -1)


def unstack_latent(arr, m: int, G: int) -> np.ndarray:
    arr = np.asarray(arr)
    return arr.reshape(arr.shape[:-1] + (G, m)).swapaxes(-1, -2)


def prepare(model: FittedModel, panel: ObservationPanel, maps: WeatherMapStream) -> PreparedData:
    resid = transform_panel(panel, model.box_cox) - model.detrender().trend(panel.times)
    Z = stack_panel(resid)
    idxs = [np.flatnonzero(np.isfinite(z)) for z in Z]
    return PreparedData(panel.times, Z, idxs, maps.align(panel.times), maps)


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

@dataclass
class KFGradients:
    nll: float
    n_scored: int
    omega: np.ndarray  # dNLL/d omega, constrained scale, OMEGA_KEYS order
    theta: np.ndarray  # (W-1, P, 2)


def kf_gradients(Z, idxs, omega, thetas, coords, normalize=True, init_var=1.0, burn=0,
                 grad=True) -> KFGradients:
    """Summed NLL of one subsequence and its exact gradients.

    ``Z[0]`` initializes the filter; transition ``k`` (into ``Z[k+1]``)
    uses ``thetas[k]`` and window-relative time ``k``.
    """
    om = dict(zip(OMEGA_KEYS, np.asarray(omega, dtype=float)))
    coords = np.asarray(coords, dtype=float)
    thetas = np.asarray(thetas, dtype=float)
    W = len(Z)
    P, n = thetas.shape[1], coords.shape[0]
    if thetas.shape[0] != W - 1:
        raise DataError("need one advection vector per transition")
    kp = KernelParams(om["ell_same"], om["ell_cross"])
    ncp = NoiseCovParams(om["sigma_eps"], om["ell_eps"], om["sigma_eta"], om["ell_eta"])
    Q = build_noise_cov("eta", ncp, coords, P)
    R = build_noise_cov("epsilon", ncp, coords, P)
    Ks = [build_propagator(k, thetas[k], coords, kp, normalize) for k in range(W - 1)]
    b0 = initial_belief(Z[0][idxs[0]], idxs[0], n * P, init_var)
    zs = [Z[k][idxs[k]] for k in range(1, W)]
    res = filter_nll(Ks, Q, R, zs, idxs[1:], b0.mean, b0.cov, burn=burn, grad=grad)
    g_om = np.zeros(6)
    theta_bar = np.zeros_like(thetas)
    if grad:
        for k in range(W - 1):
            tb, gs, gc = propagator_vjp(k, thetas[k], coords, kp, normalize, res.K_bar[k])
            theta_bar[k] = tb
            g_om[0] += gs
            g_om[1] += gc
        g_om[2:4] = noise_cov_vjp(om["sigma_eps"], om["ell_eps"], coords, P, res.R_bar)
        g_om[4:6] = noise_cov_vjp(om["sigma_eta"], om["ell_eta"], coords, P, res.Q_bar)
    return KFGradients(res.nll, res.n_scored, g_om, theta_bar)


@dataclass
class BatchResult:
    loss: float  # NLL per scored observation
    n_scored: int
    g_w: np.ndarray | None = None
    g_phi: np.ndarray | None = None


def _subseq_steps(starts, lengths):
    return np.concatenate([np.arange(s + 1, s + L) for s, L in zip(starts, lengths)])


def predict_thetas(extractor: PhysicsExtractor, maps: WeatherMapStream, map_index, cache=False):
    """Advection for each entry of ``map_index`` (each uses its own window)."""
    win = stream_windows(map_index, extractor.config.context)
    uniq, inv = np.unique(win, return_inverse=True)
    return extractor.forward(maps.data[uniq], inv.reshape(win.shape), cache=cache)


def batch_objective(model: FittedModel, data: PreparedData, starts, lengths, burn: int,
                    grad: bool = True, grad_phi: bool = True, theta_fixed=None) -> BatchResult:
    """Mean NLL over a batch of subsequences, with gradients w.r.t. ``w``
    and (optionally) the flat extractor parameters."""
    steps = _subseq_steps(starts, lengths)
    cache = None
    if theta_fixed is not None:
        theta_all = np.asarray(theta_fixed, dtype=float)[steps]
        grad_phi = False
    elif grad and grad_phi:
        theta_all, cache = predict_thetas(model.extractor, data.maps, data.map_index[steps], cache=True)
    else:
        theta_all = predict_thetas(model.extractor, data.maps, data.map_index[steps])
    omega = model.omega_array()
    coords = model.sites.coords
    total, n_tot = 0.0, 0
    g_om = np.zeros(6)
    theta_bar = np.zeros_like(theta_all)
    pos = 0
    for s, L in zip(starts, lengths):
        th = theta_all[pos:pos + L - 1]
        r = kf_gradients(data.Z[s:s + L], data.idxs[s:s + L], omega, th, coords,
                         model.normalize, model.init_var, burn, grad)
        total += r.nll
        n_tot += r.n_scored
        if grad:
            g_om += r.omega
            theta_bar[pos:pos + L - 1] = r.theta
        pos += L - 1
    if n_tot == 0:
        return BatchResult(float("nan"), 0)
    out = BatchResult(total / n_tot, n_tot)
    if grad:
        out.g_w = g_om * model.omega_scale * sigmoid(model.w) / n_tot
        if grad_phi:
            out.g_phi = model.extractor.backward(cache, theta_bar / n_tot)
    return out


# --------------------------------------------------------------------------
# optimization
# --------------------------------------------------------------------------

def tile_starts(lo: int, hi: int, length: int, min_len: int, offset: int = 0):
    """Consecutive subsequences covering ``[lo + offset, hi)``; a short
    final piece is kept when it has at least ``min_len`` steps."""
    starts, lengths = [], []
    s = lo + offset
    while s < hi:
        L = min(length, hi - s)
        if L >= min_len:
            starts.append(s)
            lengths.append(L)
        s += length
    return np.array(starts, dtype=int), np.array(lengths, dtype=int)


def _clip(g, max_norm):
    norm = float(np.sqrt(sum(float(x @ x) for x in g)))
    if norm > max_norm:
        g = [x * (max_norm / norm) for x in g]
    return g, norm


def _check_finite_loss(res: BatchResult, model: FittedModel, starts):
    if not np.isfinite(res.loss) or (res.g_w is not None and not np.all(np.isfinite(res.g_w))):
        raise NumericalError(
            f"non-finite loss on subsequences starting at {list(map(int, starts))}; "
            f"omega={model.omega}, |phi|={np.abs(model.extractor.params.flat).max():.3g}")


def initialize_model(panel: ObservationPanel, maps: WeatherMapStream, model_cfg: ModelConfig,
                     ext_cfg: ExtractorConfig) -> FittedModel:
    """Fit the preprocessing on ``panel`` and set initial parameters."""
    if ext_cfg.n_heights != len(panel.heights):
        ext_cfg = replace(ext_cfg, n_heights=len(panel.heights))
    if ext_cfg.theta_max != model_cfg.theta_max:
        ext_cfg = replace(ext_cfg, theta_max=model_cfg.theta_max)
    if model_cfg.box_cox_lambda is None:
        bc = fit_box_cox(panel, model_cfg.box_cox_offset)
    else:
        bc = BoxCoxParam(float(model_cfg.box_cox_lambda), float(model_cfg.box_cox_offset))
    W = transform_panel(panel, bc)
    det = DiurnalDetrender().fit(W, panel.times)
    resid = stack_panel(W - det.trend(panel.times))
    var = np.nanvar(resid, axis=0)
    var = np.where(np.isfinite(var) & (var > 0), var, 1.0)
    C, H, Wd = maps.shape
    if (C, H, Wd) != (ext_cfg.in_channels, ext_cfg.height, ext_cfg.width):
        ext_cfg = replace(ext_cfg, in_channels=C, height=H, width=Wd)
    ext = PhysicsExtractor(ext_cfg, NetworkParams.initialize(ext_cfg))
    ext.fit_normalization(maps.data[maps.align(panel.times)])
    # each omega entry is its initial value times softplus(w) / softplus(0),
    # so one step moves every parameter by a similar relative amount
    return FittedModel(panel.sites, panel.heights, panel.step_seconds, np.zeros(6), ext, bc,
                       det.coef_, var, normalize=model_cfg.normalize,
                       omega_scale=model_cfg.omega0() / np.log(2.0))


def offline_fit(panel: ObservationPanel, maps: WeatherMapStream, model_cfg: ModelConfig | None = None,
                ext_cfg: ExtractorConfig | None = None, cfg: TrainingConfig | None = None,
                theta=None, model: FittedModel | None = None, callback=None) -> FittedModel:
    """Jointly fit the extractor and ``omega`` by SGD with momentum.

    The last ``val_fraction`` of the panel is held out; the returned model
    carries the parameters with the lowest validation NLL.  ``theta``
    (``(T, P, 2)``) replaces the extractor output and restricts the fit to
    ``omega``.  ``model`` warm-starts from an existing fit.
    """
    model_cfg = model_cfg or ModelConfig()
    ext_cfg = ext_cfg or ExtractorConfig()
    cfg = cfg or TrainingConfig()
    T = len(panel)
    n_val = max(int(round(cfg.val_fraction * T)), cfg.burn + 2)
    T_train = T - n_val
    min_len = cfg.burn + 2
    if T_train < cfg.subseq_len:
        raise DataError(f"offline window of {T} steps is too short for training")
    if model is None:
        model = initialize_model(panel, maps, model_cfg, ext_cfg)
    else:
        model = model.copy()
    data = prepare(model, panel, maps)
    train_phi = theta is None
    rng = np.random.default_rng(cfg.seed)
    ev_starts, ev_lens = tile_starts(0, T_train, cfg.subseq_len, min_len)
    va_starts, va_lens = tile_starts(T_train - cfg.burn, T, cfg.subseq_len, min_len)

    def evaluate(starts, lens):
        return batch_objective(model, data, starts, lens, cfg.burn, grad=False, theta_fixed=theta).loss

    lr_phi, lr_w = cfg.lr_phi, cfg.lr_omega
    v_phi = np.zeros_like(model.extractor.params.flat)
    v_w = np.zeros_like(model.w)
    best = (evaluate(va_starts, va_lens), model.w.copy(), model.extractor.params.flat.copy())
    since_best = 0
    model.log = []
    for epoch in range(1, cfg.max_epochs + 1):
        # overlapping subsequences starting every subseq_stride steps
        off = int(rng.integers(cfg.subseq_stride))
        starts = np.arange(off, T_train - cfg.subseq_len + 1, cfg.subseq_stride)
        lens = np.full(starts.size, cfg.subseq_len)
        order = rng.permutation(starts.size)
        for b in range(0, order.size, cfg.batch_size):
            sel = order[b:b + cfg.batch_size]
            res = batch_objective(model, data, starts[sel], lens[sel], cfg.burn,
                                  grad=True, grad_phi=train_phi, theta_fixed=theta)
            _check_finite_loss(res, model, starts[sel])
            grads = [res.g_w] + ([res.g_phi] if train_phi else [])
            grads, _ = _clip(grads, cfg.clip_norm)
            v_w = cfg.momentum * v_w + grads[0]
            model.w = model.w - lr_w * v_w
            if train_phi:
                v_phi = cfg.momentum * v_phi + grads[1]
                model.extractor.params.flat -= lr_phi * v_phi
        train_nll = evaluate(ev_starts, ev_lens)
        val_nll = evaluate(va_starts, va_lens)
        if not (np.isfinite(train_nll) and np.isfinite(val_nll)):
            raise NumericalError(f"non-finite loss after epoch {epoch}; omega={model.omega}")
        model.log.append({"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll, "lr": lr_phi if train_phi else lr_w})
        log.info("epoch %d train %.5f val %.5f", epoch, train_nll, val_nll)
        if callback is not None:
            callback(model, model.log[-1])
        if val_nll < best[0] - 1e-6:
            best = (val_nll, model.w.copy(), model.extractor.params.flat.copy())
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
            if since_best % cfg.plateau == 0:
                lr_phi *= cfg.lr_decay
                lr_w *= cfg.lr_decay
    model.w = best[1]
    model.extractor.params.flat[:] = best[2]
    return model


def online_update(model: FittedModel, panel: ObservationPanel, maps: WeatherMapStream,
                  cfg: TrainingConfig | None = None, refit_diurnal: bool = True) -> FittedModel:
    """Re-estimate ``omega`` on a recent window with the extractor frozen.

    The diurnal trend is re-fitted on the window when it spans a day.
    Returns a new model; the input is not modified.
    """
    cfg = cfg or TrainingConfig()
    if len(panel) == 0:
        return model
    new = model.copy()
    if refit_diurnal and len(panel) > 1 and panel.times[-1] - panel.times[0] >= 86400:
        try:
            W = transform_panel(panel, new.box_cox)
            new.diurnal_coef = DiurnalDetrender().fit(W, panel.times).coef_
        except DataError:
            pass
    data = prepare(new, panel, maps)
    starts, lens = tile_starts(0, len(panel), cfg.subseq_len, cfg.burn + 2)
    if starts.size == 0:
        return new
    theta = np.zeros((len(panel), len(new.heights), 2))
    steps = _subseq_steps(starts, lens)
    theta[steps] = predict_thetas(new.extractor, maps, data.map_index[steps])
    v = np.zeros_like(new.w)
    for _ in range(cfg.online_iterations):
        res = batch_objective(new, data, starts, lens, cfg.burn, grad=True, theta_fixed=theta)
        _check_finite_loss(res, new, starts)
        (g,), _ = _clip([res.g_w], cfg.clip_norm)
        v = cfg.momentum * v + g
        new.w = new.w - cfg.lr_omega * v
    return new


def config_dict(model_cfg: ModelConfig, ext_cfg: ExtractorConfig, cfg: TrainingConfig) -> dict:
    return {"model": asdict(model_cfg), "extractor": ext_cfg.to_dict(), "training": asdict(cfg)}


# --------------------------------------------------------------------------
# composite gradient check
# --------------------------------------------------------------------------

def random_instance(seed: int, n: int = 2, P: int = 2, T: int = 8, raster: int = 12, missing: float = 0.1):
    """Small random model, panel and map stream for gradient checks."""
    from .domain import HeightLevels as _HL
    from .domain import SiteSet as _SS

    rng = np.random.default_rng(seed)
    coords = rng.uniform(-15, 15, size=(n, 2))
    sites = _SS.from_arrays([f"R{i}" for i in range(n)], coords)
    heights = _HL(tuple(100.0 + 40.0 * g for g in range(P)))
    times = 1_600_000_000 + 600 * np.arange(T, dtype=np.int64)
    values = np.exp(rng.normal(1.8, 0.3, size=(T, n, P)))
    mask = rng.random((T, n, P)) > missing
    mask[0] = True
    panel = ObservationPanel(times, np.where(mask, values, np.nan), mask, sites, heights)
    maps = WeatherMapStream(times, rng.standard_normal((T, 3, raster, raster)).astype(np.float32),
                            ["a", "b", "c"], [-40.0, -40.0, 40.0, 40.0], 600)
    ecfg = ExtractorConfig(height=raster, width=raster, n_heights=P, theta_max=12.0, context=3, seed=seed)
    ext = PhysicsExtractor(ecfg, NetworkParams.initialize(ecfg))
    # the zero-initialized head would hide every upstream gradient
    sl, _ = ext.params.slices["head.W"]
    ext.params.flat[sl] = rng.uniform(-0.3, 0.3, sl.stop - sl.start)
    ext.params.flat += rng.normal(0.0, 0.02, ext.params.size)
    ext.fit_normalization(maps.data)
    omega = rng.uniform([6, 2, 0.2, 4, 0.3, 6], [14, 6, 0.5, 12, 0.8, 14])
    var = rng.uniform(0.5, 1.5, n * P)
    scale = omega / np.log(2.0)
    model = FittedModel(sites, heights, 600, rng.normal(0, 0.3, 6), ext, BoxCoxParam(0.5),
                        np.zeros((n, P, 5)), var, normalize=bool(rng.integers(2)), omega_scale=scale)
    model.diurnal_coef[..., 0] = 3.0
    return model, panel, maps


@dataclass
class CompositeCheck:
    max_rel_error: float
    per_group: dict
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def lines(self):
        out = [f"{k:8s} max_rel_err={v:.3e}" for k, v in sorted(self.per_group.items())]
        out.append(f"max relative error {self.max_rel_error:.3e} over {self.n_coords} coords: "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def composite_gradient_check(seed: int = 0, n_coords: int = 60, tol: float = 1e-3,
                             step: float = 1e-5, **instance) -> CompositeCheck:
    """Finite-difference check of the per-observation NLL gradient w.r.t.
    ``w`` (all six entries) and a random subset of extractor parameters."""
    from .extractor import layer_of, relative_error

    model, panel, maps = random_instance(seed, **instance)
    data = prepare(model, panel, maps)
    T = len(panel)
    starts, lens = np.array([0]), np.array([T])
    res = batch_objective(model, data, starts, lens, burn=1, grad=True)

    def loss():
        return batch_objective(model, data, starts, lens, burn=1, grad=False).loss

    def fd(vec, i):
        base = vec[i]
        h = step * max(1.0, abs(base))
        vec[i] = base + h
        fp = loss()
        vec[i] = base - h
        fm = loss()
        vec[i] = base
        return (fp - fm) / (2 * h)

    rng = np.random.default_rng(seed + 1)
    params = model.extractor.params
    picks = rng.choice(params.size, size=min(n_coords, params.size), replace=False)
    names = {}
    for name, _ in params.layout:
        sl = params.slices[name][0]
        names.update({i: layer_of(name) for i in range(sl.start, sl.stop)})
    num_w = np.array([fd(model.w, i) for i in range(6)])
    num_phi = np.array([fd(params.flat, i) for i in picks])
    floor = 1e-6 * max(np.abs(res.g_phi).max(), np.abs(res.g_w).max())
    err_w = relative_error(res.g_w, num_w, floor)
    err_phi = relative_error(res.g_phi[picks], num_phi, floor)
    groups = {"omega": float(err_w.max())}
    for i, e in zip(picks, err_phi):
        groups[names[i]] = max(groups.get(names[i], 0.0), float(e))
    return CompositeCheck(float(max(err_w.max(), err_phi.max())), groups, 6 + picks.size, tol)
