"""Kalman-filter inference for the multivariate IDE state-space model.

Latent dynamics ``Y_t = K_t Y_{t-1} + eta_t`` and observations
``Z_t = H_t Y_t + eps_t``.  Observation maps are given as index arrays
(see :class:`deepmide.domain.ObservationMap`); ``H_t`` is never formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import norm

from .domain import GaussianBelief
from .exceptions import NumericalError

LOG_2PI = np.log(2.0 * np.pi)
JITTERS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


def symmetrize(C):
    return 0.5 * (C + C.T)


def safe_cholesky(S, context: str = ""):
    """Lower Cholesky factor, retrying with jitter up to 1e-8 of the mean diagonal."""
    scale = float(np.trace(S)) / max(S.shape[0], 1)
    for j in JITTERS:
        try:
            return np.linalg.cholesky(S + j * scale * np.eye(S.shape[0]) if j else S)
        except np.linalg.LinAlgError:
            continue
    eig = np.linalg.eigvalsh(symmetrize(S)).min()
    raise NumericalError(f"matrix not positive definite after jitter{context}; min eigenvalue {eig:.3g}")


def kf_predict(belief: GaussianBelief, K, Q) -> GaussianBelief:
    mean = K @ belief.mean
    cov = symmetrize(K @ belief.cov @ K.T + Q)
    return GaussianBelief(mean, cov)


def kf_update(belief: GaussianBelief, z, index, R):
    """Condition on the observed coordinates ``index``.

    ``z`` holds the observed values only and ``R`` is the measurement
    covariance already restricted to those rows.  Returns the filtered
    belief, the innovation and its covariance; all are empty when nothing
    was observed.
    """
    index = np.asarray(index, dtype=int)
    if index.size == 0:
        return belief, np.zeros(0), np.zeros((0, 0))
    m, C = belief.mean, belief.cov
    nu = np.asarray(z, dtype=float) - m[index]
    B = C[:, index]
    S = symmetrize(B[index] + R)
    L = safe_cholesky(S, " (innovation covariance)")
    gain = cho_solve((L, True), B.T).T
    mean = m + gain @ nu
    cov = symmetrize(C - gain @ B.T)
    return GaussianBelief(mean, cov), nu, S


def step_loglik(innovation, innovation_cov) -> float:
    """Gaussian log-density of one innovation."""
    d = innovation.size
    if d == 0:
        return 0.0
    L = safe_cholesky(innovation_cov, " (innovation covariance)")
    w = solve_triangular(L, innovation, lower=True)
    return float(-0.5 * d * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * w @ w)


def initial_belief(z0, index0, size, variances) -> GaussianBelief:
    """First observation lifted through ``H^T`` with a diagonal covariance."""
    mean = np.zeros(size)
    mean[np.asarray(index0, dtype=int)] = z0
    return GaussianBelief(mean, np.diag(np.broadcast_to(np.asarray(variances, float), (size,)).copy()))


@dataclass
class FilterState:
    belief: GaussianBelief
    step: int = 0
    loglik: float = 0.0
    history: list = field(default_factory=list)


def run_filter(belief, propagators, Q, observations, R_full, keep_history=False) -> FilterState:
    """Filter a sequence.

    ``observations`` is a sequence of ``(z, index)`` pairs aligned with
    ``propagators``; ``R_full`` is the full measurement covariance.
    """
    state = FilterState(belief)
    for K, (z, idx) in zip(propagators, observations):
        pred = kf_predict(state.belief, K, Q)
        post, nu, S = kf_update(pred, z, idx, R_full[np.ix_(idx, idx)])
        state.loglik += step_loglik(nu, S)
        state.belief = post
        state.step += 1
        if keep_history:
            state.history.append((pred, post))
    return state


@dataclass
class ForecastDistribution:
    """Per-horizon latent and observation-space moments.

    Arrays are stacked over horizon along the first axis.
    """

    latent_mean: np.ndarray
    latent_cov: np.ndarray
    obs_mean: np.ndarray
    obs_cov: np.ndarray

    def interval(self, level: float = 0.95):
        z = norm.ppf(0.5 + level / 2.0)
        sd = np.sqrt(np.clip(np.diagonal(self.obs_cov, axis1=1, axis2=2), 0.0, None))
        return self.obs_mean - z * sd, self.obs_mean + z * sd


def forecast(belief: GaussianBelief, propagators, Q, R, index=None) -> ForecastDistribution:
    """h-step forecasts from the filtered belief at the issue time.

    The latent recursion is iterated without updates; each step is mapped
    to observation space with ``index`` (all coordinates by default).
    """
    if propagators is None or len(propagators) == 0:
        raise ValueError("forecast needs one propagator per forecast step")
    size = belief.mean.size
    idx = np.arange(size) if index is None else np.asarray(index, dtype=int)
    Rsub = R[np.ix_(idx, idx)]
    means, covs, zm, zc = [], [], [], []
    cur = belief
    for K in propagators:
        if K is None:
            raise ValueError("missing propagator for a forecast step")
        cur = kf_predict(cur, K, Q)
        means.append(cur.mean)
        covs.append(cur.cov)
        zm.append(cur.mean[idx])
        zc.append(symmetrize(Rsub + cur.cov[np.ix_(idx, idx)]))
    return ForecastDistribution(np.array(means), np.array(covs), np.array(zm), np.array(zc))
