"""Advection-driven redistribution kernel, propagator and noise covariances.

The kernel between latent coordinates ``(p, s)`` and ``(q, x)`` at the
window-relative step ``t`` is::

    k(s, x) = exp(-|s - x - theta_p * t + theta_q * (t + 1)|^2 / ell^2)

with ``ell = ell_same`` when ``p == q`` and ``ell_cross`` otherwise.
For ``p == q`` the time factors cancel to a per-step shift by ``theta_p``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .domain import pairwise_distances
from .exceptions import ConfigurationError


@dataclass(frozen=True)
class KernelParams:
    ell_same: float
    ell_cross: float

    def __post_init__(self):
        if not (self.ell_same > 0 and self.ell_cross > 0):
            raise ConfigurationError("kernel length-scales must be positive")


@dataclass(frozen=True)
class NoiseCovParams:
    sigma_eps: float
    ell_eps: float
    sigma_eta: float
    ell_eta: float

    def __post_init__(self):
        if min(self.sigma_eps, self.ell_eps, self.sigma_eta, self.ell_eta) <= 0:
            raise ConfigurationError("noise covariance parameters must be positive")


def eval_kernel(p, q, s, x, t, theta_p, theta_q, params: KernelParams) -> float:
    """Scalar kernel value for heights ``p, q`` and planar points ``s, x``."""
    ell = params.ell_same if p == q else params.ell_cross
    v = (np.asarray(s, float) - np.asarray(x, float)
         - np.asarray(theta_p, float) * t + np.asarray(theta_q, float) * (t + 1))
    return float(np.exp(-(v @ v) / ell ** 2))


def _displacements(t, theta, coords):
    # V[p, i, q, j] = s_i - s_j - theta_p * t + theta_q * (t + 1)
    theta = np.asarray(theta, dtype=float).reshape(-1, 2)
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    D = coords[:, None, :] - coords[None, :, :]
    return (D[None, :, None, :, :]
            - (theta * t)[:, None, None, None, :]
            + (theta * (t + 1))[None, None, :, None, :])


def _ell_grid(P, n, ell_same, ell_cross):
    same = np.eye(P, dtype=bool)[:, None, :, None] & np.ones((1, n, 1, n), dtype=bool)
    return same, np.where(same, ell_same, ell_cross)


def build_propagator(t, theta, coords, params: KernelParams, normalize: bool = False) -> np.ndarray:
    """Assemble ``K_t`` (``nP x nP``, height-major blocks).

    Parameters
    ----------
    t : int
        Window-relative step index (0 at the first transition of the window).
    theta : array (P, 2)
        Advection vector per height, km per step.
    coords : array (n, 2)
        Planar site coordinates, km.
    normalize : bool
        Divide each row by ``max(row_sum, 1)`` so no row sums above one.
    """
    V = _displacements(t, theta, coords)
    P, n = V.shape[0], V.shape[1]
    _, ell = _ell_grid(P, n, params.ell_same, params.ell_cross)
    K = np.exp(-(V ** 2).sum(-1) / ell ** 2).reshape(P * n, P * n)
    if normalize:
        K = K / np.maximum(K.sum(1), 1.0)[:, None]
    return K


def propagator_vjp(t, theta, coords, params: KernelParams, normalize: bool, K_bar):
    """Pull ``dL/dK_t`` back to ``(dL/dtheta, dL/dell_same, dL/dell_cross)``."""
    V = _displacements(t, theta, coords)
    P, n = V.shape[0], V.shape[1]
    same, ell = _ell_grid(P, n, params.ell_same, params.ell_cross)
    sq = (V ** 2).sum(-1)
    k = np.exp(-sq / ell ** 2).reshape(P * n, P * n)
    K_bar = np.asarray(K_bar, dtype=float)
    if normalize:
        r = k.sum(1)
        scale = np.maximum(r, 1.0)
        k_bar = K_bar / scale[:, None]
        over = r > 1.0
        if over.any():
            corr = (K_bar * k).sum(1) / r ** 2
            k_bar = k_bar - np.where(over, corr, 0.0)[:, None]
    else:
        k_bar = K_bar
    G = (k_bar * k).reshape(P, n, P, n)
    V_bar = (-2.0 * G / ell ** 2)[..., None] * V
    theta_bar = -t * V_bar.sum(axis=(1, 2, 3)) + (t + 1) * V_bar.sum(axis=(0, 1, 3))
    ell_term = G * 2.0 * sq / ell ** 3
    return theta_bar, float(ell_term[same].sum()), float(ell_term[~same].sum())


def _sq_exp(dist, sigma, ell):
    return sigma ** 2 * np.exp(-0.5 * dist ** 2 / ell ** 2)


def build_noise_cov(kind: str, params: NoiseCovParams, coords, n_heights: int) -> np.ndarray:
    """Squared-exponential spatial covariance, block-diagonal over heights."""
    if kind == "epsilon":
        sigma, ell = params.sigma_eps, params.ell_eps
    elif kind == "eta":
        sigma, ell = params.sigma_eta, params.ell_eta
    else:
        raise ValueError(f"kind must be 'epsilon' or 'eta', not {kind!r}")
    block = _sq_exp(pairwise_distances(coords), sigma, ell)
    return np.kron(np.eye(n_heights), block)


def noise_cov_vjp(sigma, ell, coords, n_heights, C_bar):
    """Gradient of ``<C_bar, Sigma(sigma, ell)>`` w.r.t. ``(sigma, ell)``."""
    d = pairwise_distances(coords)
    n = d.shape[0]
    C_bar = np.asarray(C_bar, dtype=float).reshape(n_heights, n, n_heights, n)
    B = np.einsum("pipj->ij", C_bar)
    E = np.exp(-0.5 * d ** 2 / ell ** 2)
    g_sigma = float((B * 2.0 * sigma * E).sum())
    g_ell = float((B * sigma ** 2 * E * d ** 2 / ell ** 3).sum())
    return g_sigma, g_ell


def spectral_radius(A, tol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Largest absolute eigenvalue by power iteration.

    Converges for matrices with a unique dominant eigenvalue (always the
    case for the strictly positive kernel matrices).  On non-convergence a
    warning is issued and the last estimate returned.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("spectral_radius needs a square matrix")
    x = np.ones(A.shape[0]) / np.sqrt(A.shape[0])
    est = 0.0
    for _ in range(max_iter):
        y = A @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        x = y / norm
        if abs(norm - est) <= tol * norm:
            return float(norm)
        est = float(norm)
    warnings.warn("spectral_radius: power iteration did not converge", RuntimeWarning)
    return est
