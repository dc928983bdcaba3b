"""Physics extractor: weather-map windows to per-height advection vectors.

Architecture (compact stand-in for a CNN + transformer stack)::

    map  -> conv3x3/2 -> ReLU -> conv3x3/2 -> ReLU -> global avg pool
         -> linear (feature vector, F)
    window of L feature vectors + sinusoidal position code
         -> single-head attention, query = latest position
         -> output projection -> linear head (2P) -> tanh * theta_max

Forward and backward passes are written out in numpy so gradients are
exact; parameters live in one flat float64 vector.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, DataError


@dataclass
class ExtractorConfig:
    in_channels: int = 3
    height: int = 20
    width: int = 20
    conv_channels: tuple = (8, 16)
    kernel: int = 3
    stride: int = 2
    feature_dim: int = 32
    context: int = 6
    n_heights: int = 3
    theta_max: float = 30.0
    seed: int = 0

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if self.context < 1:
            raise ConfigurationError("extractor context length must be >= 1")
        if len(self.conv_channels) != 2:
            raise ConfigurationError("the extractor has exactly two conv layers")
        if min(self.conv_shapes()[-1][1:]) < 1:
            raise ConfigurationError("raster too small for two strided convolutions")

    def conv_shapes(self):
        shapes = [(self.in_channels, self.height, self.width)]
        for c in self.conv_channels:
            _, h, w = shapes[-1]
            shapes.append((c, (h - self.kernel) // self.stride + 1, (w - self.kernel) // self.stride + 1))
        return shapes

    def layout(self):
        """Ordered ``(name, shape)`` list of parameter blocks."""
        k, F, C = self.kernel, self.feature_dim, self.in_channels
        c1, c2 = self.conv_channels
        return [
            ("conv1.W", (c1, C, k, k)), ("conv1.b", (c1,)),
            ("conv2.W", (c2, c1, k, k)), ("conv2.b", (c2,)),
            ("embed.W", (F, c2)), ("embed.b", (F,)),
            ("attn.Wq", (F, F)), ("attn.Wk", (F, F)), ("attn.Wv", (F, F)),
            ("attn.Wo", (F, F)), ("attn.bo", (F,)),
            ("head.W", (2 * self.n_heights, F)), ("head.b", (2 * self.n_heights,)),
        ]

    def to_dict(self):
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d


def layer_of(name: str) -> str:
    return name.split(".")[0]


class NetworkParams:
    """Flat parameter vector with named views."""

    def __init__(self, config: ExtractorConfig, flat=None):
        self.config = config
        self.layout = config.layout()
        self.size = sum(int(np.prod(s)) for _, s in self.layout)
        if flat is None:
            flat = np.zeros(self.size)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.size,):
            raise ConfigurationError(f"parameter vector has {flat.size} entries, expected {self.size}")
        if not np.all(np.isfinite(flat)):
            raise ConfigurationError("non-finite network parameters")
        self.flat = flat
        self.slices = {}
        pos = 0
        for name, shape in self.layout:
            k = int(np.prod(shape))
            self.slices[name] = (slice(pos, pos + k), shape)
            pos += k

    def __getitem__(self, name):
        sl, shape = self.slices[name]
        return self.flat[sl].reshape(shape)

    def copy(self):
        return NetworkParams(self.config, self.flat.copy())

    @classmethod
    def initialize(cls, config: ExtractorConfig, seed=None):
        """Glorot-uniform weights and zero biases; the output head starts at
        zero so the initial advection is zero rather than saturated."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        p = cls(config)
        for name, shape in p.layout:
            if (name.endswith(("b", "bo")) and len(shape) == 1) or name == "head.W":
                continue
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_out, fan_in = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            sl, _ = p.slices[name]
            p.flat[sl] = rng.uniform(-lim, lim, size=int(np.prod(shape)))
        return p


def positional_encoding(L: int, F: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(F)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / F)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _conv_forward(X, W, b, stride):
    k = W.shape[-1]
    patches = sliding_window_view(X, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", patches, W, optimize=True) + b[None, :, None, None]
    return out, patches


def _conv_backward(g, patches, W, x_shape, stride, need_dx=True):
    dW = np.einsum("nohw,nchwij->ocij", g, patches, optimize=True)
    db = g.sum(axis=(0, 2, 3))
    if not need_dx:
        return dW, db, None
    k = W.shape[-1]
    dpatch = np.einsum("nohw,ocij->nchwij", g, W, optimize=True)
    dX = np.zeros(x_shape)
    Ho, Wo = g.shape[2], g.shape[3]
    for i in range(k):
        for j in range(k):
            dX[:, :, i:i + stride * (Ho - 1) + 1:stride, j:j + stride * (Wo - 1) + 1:stride] += dpatch[..., i, j]
    return dW, db, dX


@dataclass
class ForwardCache:
    X: np.ndarray
    windows: np.ndarray
    conv: list = field(default_factory=list)
    pooled: np.ndarray | None = None
    feats: np.ndarray | None = None
    att: list = field(default_factory=list)
    u: np.ndarray | None = None


class PhysicsExtractor:
    """Maps raster windows to advection vectors ``(steps, P, 2)``.

    ``input_mean`` / ``input_std`` (per channel) standardize the rasters and
    are part of the fitted model.
    """

    def __init__(self, config: ExtractorConfig, params: NetworkParams | None = None,
                 input_mean=None, input_std=None):
        self.config = config
        self.params = params if params is not None else NetworkParams.initialize(config)
        C = config.in_channels
        self.input_mean = np.zeros(C) if input_mean is None else np.asarray(input_mean, float)
        self.input_std = np.ones(C) if input_std is None else np.asarray(input_std, float)
        self._pe = positional_encoding(config.context, config.feature_dim)

    def fit_normalization(self, maps) -> "PhysicsExtractor":
        X = np.asarray(maps, dtype=float)
        self.input_mean = X.mean(axis=(0, 2, 3))
        std = X.std(axis=(0, 2, 3))
        self.input_std = np.where(std > 0, std, 1.0)
        return self

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        c = self.config
        if X.ndim == 3:
            X = X[None]
        if X.shape[1:] != (c.in_channels, c.height, c.width):
            raise DataError(f"map shape {X.shape[1:]} does not match extractor "
                            f"({c.in_channels}, {c.height}, {c.width})")
        return X

    # -- forward ----------------------------------------------------------

    def encode(self, X, cache: ForwardCache | None = None):
        """Feature vectors ``(M, F)`` for maps ``(M, C, H, W)``."""
        p, s = self.params, self.config.stride
        X = self._check(X)
        Xn = (X - self.input_mean[None, :, None, None]) / self.input_std[None, :, None, None]
        a1, p1 = _conv_forward(Xn, p["conv1.W"], p["conv1.b"], s)
        h1 = np.maximum(a1, 0.0)
        a2, p2 = _conv_forward(h1, p["conv2.W"], p["conv2.b"], s)
        h2 = np.maximum(a2, 0.0)
        pooled = h2.mean(axis=(2, 3))
        feats = pooled @ p["embed.W"].T + p["embed.b"]
        if cache is not None:
            cache.conv = [(Xn.shape, p1, a1), (h1.shape, p2, a2)]
            cache.pooled = pooled
            cache.feats = feats
        return feats

    def _attend(self, feats, windows, cache: ForwardCache | None = None):
        p = self.params
        F = self.config.feature_dim
        Hs = feats[windows] + self._pe[None]  # (S, L, F)
        q = Hs[:, -1] @ p["attn.Wq"].T
        Kx = Hs @ p["attn.Wk"].T
        V = Hs @ p["attn.Wv"].T
        scores = np.einsum("slf,sf->sl", Kx, q) / np.sqrt(F)
        scores -= scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=1, keepdims=True)
        ctx = np.einsum("sl,slf->sf", w, V)
        o = ctx @ p["attn.Wo"].T + p["attn.bo"]
        u = o @ p["head.W"].T + p["head.b"]
        if cache is not None:
            cache.att = [Hs, q, Kx, V, w, ctx, o]
            cache.u = u
        return u, w

    def forward(self, X, windows, cache: bool = False):
        """Advection ``(S, P, 2)`` for each row of ``windows`` (indices into ``X``,
        oldest first, latest last)."""
        windows = np.asarray(windows, dtype=int)
        if windows.ndim != 2 or windows.shape[1] != self.config.context:
            raise DataError(f"windows must be (steps, {self.config.context})")
        c = ForwardCache(X, windows) if cache else None
        feats = self.encode(X, c)
        u, _ = self._attend(feats, windows, c)
        theta = self.config.theta_max * np.tanh(u)
        theta = theta.reshape(-1, self.config.n_heights, 2)
        return (theta, c) if cache else theta

    def attention_weights(self, X, windows):
        feats = self.encode(X)
        return self._attend(feats, np.asarray(windows, dtype=int))[1]

    # -- backward ---------------------------------------------------------

    def backward(self, cache: ForwardCache, theta_bar, need_dx: bool = False):
        """Exact gradient of ``<theta_bar, theta>`` w.r.t. the flat parameters
        (and the raw input maps when ``need_dx``)."""
        p, cfg = self.params, self.config
        grads = NetworkParams(cfg)
        g = grads.flat
        sl = {k: v[0] for k, v in grads.slices.items()}
        F = cfg.feature_dim
        Hs, q, Kx, V, w, ctx, o = cache.att
        th = np.tanh(cache.u)
        du = np.asarray(theta_bar, float).reshape(cache.u.shape) * cfg.theta_max * (1.0 - th ** 2)
        g[sl["head.W"]] = (du.T @ o).ravel()
        g[sl["head.b"]] = du.sum(0)
        do = du @ p["head.W"]
        g[sl["attn.Wo"]] = (do.T @ ctx).ravel()
        g[sl["attn.bo"]] = do.sum(0)
        dctx = do @ p["attn.Wo"]
        dw = np.einsum("sf,slf->sl", dctx, V)
        dV = w[:, :, None] * dctx[:, None, :]
        dscores = w * (dw - (dw * w).sum(axis=1, keepdims=True)) / np.sqrt(F)
        dq = np.einsum("sl,slf->sf", dscores, Kx)
        dK = dscores[:, :, None] * q[:, None, :]
        g[sl["attn.Wq"]] = (dq.T @ Hs[:, -1]).ravel()
        g[sl["attn.Wk"]] = np.einsum("slf,slg->fg", dK, Hs).ravel()
        g[sl["attn.Wv"]] = np.einsum("slf,slg->fg", dV, Hs).ravel()
        dH = dK @ p["attn.Wk"] + dV @ p["attn.Wv"]
        dH[:, -1] += dq @ p["attn.Wq"]
        dfeats = np.zeros_like(cache.feats)
        np.add.at(dfeats, cache.windows, dH)
        g[sl["embed.W"]] = (dfeats.T @ cache.pooled).ravel()
        g[sl["embed.b"]] = dfeats.sum(0)
        dpooled = dfeats @ p["embed.W"]
        (x1_shape, p1, a1), (h1_shape, p2, a2) = cache.conv
        Ho, Wo = a2.shape[2:]
        da2 = np.broadcast_to(dpooled[:, :, None, None] / (Ho * Wo), a2.shape) * (a2 > 0)
        dW2, db2, dh1 = _conv_backward(da2, p2, p["conv2.W"], h1_shape, cfg.stride)
        g[sl["conv2.W"]] = dW2.ravel()
        g[sl["conv2.b"]] = db2
        da1 = dh1 * (a1 > 0)
        dW1, db1, dXn = _conv_backward(da1, p1, p["conv1.W"], x1_shape, cfg.stride, need_dx)
        g[sl["conv1.W"]] = dW1.ravel()
        g[sl["conv1.b"]] = db1
        if need_dx:
            return g, dXn / self.input_std[None, :, None, None]
        return g


def stream_windows(step_index, context: int) -> np.ndarray:
    """Window rows ``[t-L+1, ..., t]`` for each map index ``t``, clamped at 0
    (the earliest map is repeated at the start of the stream)."""
    t = np.asarray(step_index, dtype=int)[:, None]
    return np.maximum(t + np.arange(-context + 1, 1)[None, :], 0)


def encode_map(X_t, extractor: PhysicsExtractor) -> np.ndarray:
    return extractor.encode(X_t)[0]


def predict_advection(window, extractor: PhysicsExtractor) -> np.ndarray:
    """``(P, 2)`` advection from one window of ``L`` maps (oldest first)."""
    window = np.asarray(window, dtype=float)
    L = extractor.config.context
    if window.shape[0] < L:
        pad = np.repeat(window[:1], L - window.shape[0], axis=0)
        window = np.concatenate([pad, window])
    window = window[-L:]
    return extractor.forward(window, np.arange(L)[None])[0]


def backward(window, extractor: PhysicsExtractor, upstream, need_dx=False):
    window = np.asarray(window, dtype=float)
    L = extractor.config.context
    _, cache = extractor.forward(window[-L:], np.arange(L)[None], cache=True)
    return extractor.backward(cache, np.asarray(upstream, float)[None], need_dx)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_layer: dict
    n_coords: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def lines(self):
        out = [f"{name:8s} max_rel_err={err:.3e}" for name, err in sorted(self.per_layer.items())]
        out.append(f"max relative error {self.max_rel_error:.3e} over {self.n_coords} coords: "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def relative_error(analytic, numeric, floor):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_check(extractor: PhysicsExtractor, X, windows, probe=None, n_coords: int = 240,
                   step: float = 1e-5, tol: float = 1e-3, seed: int = 0,
                   grad_fn=None) -> GradCheckReport:
    """Compare analytic and central-difference gradients of a scalar probe
    ``sum(probe * theta)`` on a random subset of parameters.

    ``grad_fn`` may replace the analytic gradient (used to test that the
    check fails on a corrupted gradient).  The step is scaled by each
    parameter's magnitude; the relative error uses a floor of ``1e-6``
    times the largest gradient entry so exact zeros do not divide by zero.
    """
    rng = np.random.default_rng(seed)
    theta, cache = extractor.forward(X, windows, cache=True)
    if probe is None:
        probe = rng.standard_normal(theta.shape)
    analytic = (grad_fn or extractor.backward)(cache, probe)
    params = extractor.params
    picks = []
    per_layer_names = sorted({layer_of(n) for n, _ in params.layout})
    # spread the sample over every layer
    for layer in per_layer_names:
        idx = np.concatenate([np.arange(params.size)[params.slices[n][0]]
                              for n, _ in params.layout if layer_of(n) == layer])
        k = min(idx.size, max(n_coords // len(per_layer_names), 1))
        picks.append(rng.choice(idx, size=k, replace=False))
    picks = np.concatenate(picks)
    base = params.flat.copy()
    numeric = np.empty(picks.size)
    for k, i in enumerate(picks):
        h = step * max(1.0, abs(base[i]))
        params.flat[i] = base[i] + h
        fp = float((probe * extractor.forward(X, windows)).sum())
        params.flat[i] = base[i] - h
        fm = float((probe * extractor.forward(X, windows)).sum())
        params.flat[i] = base[i]
        numeric[k] = (fp - fm) / (2 * h)
    floor = 1e-6 * max(np.abs(analytic).max(), 1e-12)
    err = relative_error(analytic[picks], numeric, floor)
    names = {}
    for n, _ in params.layout:
        sl = params.slices[n][0]
        names.update({i: layer_of(n) for i in range(sl.start, sl.stop)})
    per_layer = {}
    for i, e in zip(picks, err):
        per_layer[names[i]] = max(per_layer.get(names[i], 0.0), float(e))
    return GradCheckReport(float(err.max()), per_layer, int(picks.size), tol)
