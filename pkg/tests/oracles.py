"""Reference implementations used only by the tests."""

import numpy as np
from scipy.stats import multivariate_normal

from deepmide.kernel import KernelParams, NoiseCovParams, build_noise_cov, build_propagator


def joint_gaussian_filter(m0, P0, Ks, Q, R, obs):
    """Filtered moments and total log-likelihood by conditioning the full
    joint Gaussian of states and observations (no recursion).

    ``obs`` holds ``(z, idx)`` per step; ``R`` is the full measurement covariance.
    Returns ``(means, covs, loglik)`` with one filtered moment per step.
    """
    N, T = m0.size, len(Ks)
    # base variables: Y_0, eta_1..eta_T, then the observed eps entries
    n_eps = [len(idx) for _, idx in obs]
    D = N * (T + 1) + sum(n_eps)
    mu = np.zeros(D)
    mu[:N] = m0
    C = np.zeros((D, D))
    C[:N, :N] = P0
    for t in range(T):
        sl = slice(N * (t + 1), N * (t + 2))
        C[sl, sl] = Q
    pos = N * (T + 1)
    eps_slices = []
    for _, idx in obs:
        sl = slice(pos, pos + len(idx))
        C[sl, sl] = R[np.ix_(idx, idx)]
        eps_slices.append(sl)
        pos += len(idx)
    # linear maps from base variables to Y_t and Z_t
    A = np.zeros((N, D))
    A[:, :N] = np.eye(N)
    Ys, Zs = [], []
    for t in range(T):
        A = Ks[t] @ A
        A[:, N * (t + 1):N * (t + 2)] += np.eye(N)
        Ys.append(A.copy())
        idx = obs[t][1]
        Zt = A[idx].copy()
        Zt[:, eps_slices[t]] += np.eye(len(idx))
        Zs.append(Zt)
    means, covs = [], []
    for t in range(T):
        Zmat = np.vstack(Zs[: t + 1])
        zval = np.concatenate([obs[k][0] for k in range(t + 1)])
        Sy = Ys[t] @ C @ Ys[t].T
        Syz = Ys[t] @ C @ Zmat.T
        Szz = Zmat @ C @ Zmat.T
        if Zmat.shape[0]:
            gain = np.linalg.solve(Szz, Syz.T).T
            means.append(Ys[t] @ mu + gain @ (zval - Zmat @ mu))
            covs.append(Sy - gain @ Syz.T)
        else:
            means.append(Ys[t] @ mu)
            covs.append(Sy)
    Zmat = np.vstack(Zs)
    zval = np.concatenate([z for z, _ in obs])
    ll = multivariate_normal(Zmat @ mu, Zmat @ C @ Zmat.T).logpdf(zval) if zval.size else 0.0
    return means, covs, float(ll)


def naive_conv(X, W, b, stride):
    """Valid cross-correlation by explicit loops."""
    n, c, h, w = X.shape
    o, _, k, _ = W.shape
    Ho, Wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, o, Ho, Wo))
    for a in range(n):
        for f in range(o):
            for y in range(Ho):
                for x in range(Wo):
                    patch = X[a, :, y * stride:y * stride + k, x * stride:x * stride + k]
                    out[a, f, y, x] = np.sum(patch * W[f]) + b[f]
    return out


def naive_attention(H, Wq, Wk, Wv):
    """Single-query softmax attention with the last row as the query."""
    L, F = H.shape
    q = Wq @ H[-1]
    scores = np.array([(Wk @ H[i]) @ q for i in range(L)]) / np.sqrt(F)
    e = np.exp(scores - scores.max())
    w = e / e.sum()
    ctx = sum(w[i] * (Wv @ H[i]) for i in range(L))
    return ctx, w


def scalar_kernel(p, q, s, x, t, th_p, th_q, ell_same, ell_cross):
    # written out per component, no vector algebra
    ell = ell_same if p == q else ell_cross
    dx = s[0] - x[0] - th_p[0] * t + th_q[0] * (t + 1)
    dy = s[1] - x[1] - th_p[1] * t + th_q[1] * (t + 1)
    return np.exp(-(dx * dx + dy * dy) / (ell * ell))


def random_problem(rng, n=None, P=None, T=None, missing=0.25):
    n = n or int(rng.integers(1, 4))
    P = P or int(rng.integers(1, 3))
    T = T or int(rng.integers(1, 6))
    N = n * P
    coords = rng.uniform(-10, 10, (n, 2))
    kp = KernelParams(*rng.uniform(4, 15, 2))
    ncp = NoiseCovParams(*rng.uniform([0.1, 3, 0.2, 3], [0.6, 12, 1.0, 12]))
    Q = build_noise_cov("eta", ncp, coords, P)
    R = build_noise_cov("epsilon", ncp, coords, P)
    Ks = [build_propagator(t, rng.uniform(-3, 3, (P, 2)), coords, kp, bool(rng.integers(2)))
          for t in range(T)]
    obs = []
    for _ in range(T):
        idx = np.flatnonzero(rng.random(N) > missing)
        obs.append((rng.standard_normal(idx.size), idx))
    A = rng.standard_normal((N, N))
    return rng.standard_normal(N), A @ A.T / N + 0.5 * np.eye(N), Ks, Q, R, obs
