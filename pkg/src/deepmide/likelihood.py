"""Innovation-form negative log-likelihood of a filtered sequence and its
exact reverse-mode gradient.

The forward pass is the plain covariance-form filter of :mod:`deepmide.ssm`
(predict, update, symmetrize).  The backward pass walks the recorded tape in
reverse and returns adjoints for every propagator ``K_t`` and for the two
noise covariances; the kernel and covariance parameterizations are chained
on by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .ssm import LOG_2PI, safe_cholesky, symmetrize


@dataclass
class _Step:
    K: np.ndarray
    m_prev: np.ndarray
    P_prev: np.ndarray
    idx: np.ndarray
    B: np.ndarray | None = None
    Si: np.ndarray | None = None
    alpha: np.ndarray | None = None


@dataclass
class NLLResult:
    nll: float
    n_scored: int
    K_bar: list | None = None
    Q_bar: np.ndarray | None = None
    R_bar: np.ndarray | None = None
    step_nll: np.ndarray | None = None


def filter_nll(Ks, Q, R, zs, idxs, m0, P0, burn: int = 0, grad: bool = False) -> NLLResult:
    """Negative log-likelihood summed over steps ``t >= burn``.

    Parameters
    ----------
    Ks : sequence of (N, N) arrays
        Propagator for each transition.
    Q, R : (N, N) arrays
        Process and (full) measurement covariance.
    zs, idxs : sequences
        Observed values and the latent indices they observe, per step.
    m0, P0 : initial filtered mean and covariance.
    burn : int
        Leading steps that are filtered but not scored.
    grad : bool
        Also return adjoints ``dNLL/dK_t``, ``dNLL/dQ`` and ``dNLL/dR``.
    """
    m, P = np.asarray(m0, float), np.asarray(P0, float)
    tape: list[_Step] = []
    total, n_scored = 0.0, 0
    step_nll = np.zeros(len(Ks))
    for t, (K, z, idx) in enumerate(zip(Ks, zs, idxs)):
        idx = np.asarray(idx, dtype=int)
        rec = _Step(K, m, P, idx)
        m = K @ m
        P = symmetrize(K @ P @ K.T + Q)
        if idx.size:
            nu = np.asarray(z, float) - m[idx]
            B = P[:, idx]
            S = symmetrize(B[idx] + R[np.ix_(idx, idx)])
            L = safe_cholesky(S, f" at step {t}")
            Si = cho_solve((L, True), np.eye(idx.size))
            alpha = Si @ nu
            if t >= burn:
                val = 0.5 * idx.size * LOG_2PI + np.log(np.diag(L)).sum() + 0.5 * nu @ alpha
                step_nll[t] = val
                total += val
                n_scored += idx.size
            m = m + B @ alpha
            P = symmetrize(P - B @ Si @ B.T)
            rec.B, rec.Si, rec.alpha = B, Si, alpha
        tape.append(rec)
    out = NLLResult(float(total), n_scored, step_nll=step_nll)
    if not grad:
        return out

    N = m.size
    m_bar = np.zeros(N)
    P_bar = np.zeros((N, N))
    Q_bar = np.zeros((N, N))
    R_bar = np.zeros((N, N))
    K_bars = [None] * len(tape)
    for t in range(len(tape) - 1, -1, -1):
        rec = tape[t]
        P_bar = symmetrize(P_bar)
        idx = rec.idx
        if idx.size:
            w = 1.0 if t >= burn else 0.0
            B, Si, alpha = rec.B, rec.Si, rec.alpha
            a_bar = B.T @ m_bar
            SiBt = Si @ B.T
            B_bar = np.outer(m_bar, alpha) - 2.0 * P_bar @ SiBt.T
            nu_bar = Si @ a_bar + w * alpha
            S_bar = (-np.outer(Si @ a_bar, alpha) + SiBt @ P_bar @ SiBt.T
                     + 0.5 * w * (Si - np.outer(alpha, alpha)))
            S_bar = symmetrize(S_bar)
            mp_bar = m_bar.copy()
            mp_bar[idx] -= nu_bar
            Pp_bar = P_bar.copy()
            Pp_bar[:, idx] += B_bar
            Pp_bar[np.ix_(idx, idx)] += S_bar
            R_bar[np.ix_(idx, idx)] += S_bar
        else:
            mp_bar, Pp_bar = m_bar, P_bar
        C_bar = symmetrize(Pp_bar)
        K = rec.K
        Q_bar += C_bar
        K_bars[t] = 2.0 * C_bar @ K @ rec.P_prev + np.outer(mp_bar, rec.m_prev)
        P_bar = K.T @ C_bar @ K
        m_bar = K.T @ mp_bar
    out.K_bar, out.Q_bar, out.R_bar = K_bars, Q_bar, R_bar
    return out
